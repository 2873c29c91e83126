//! End-to-end runs of every `imgt` subcommand on 4×4 images.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use imgt::io::{read_dataset, read_ppm, save_checkpoint, write_ppm};
use imgt::{Image, Model32, Rng};

pub const SMOKE_BUDGET: Duration = Duration::from_secs(60);

const DECODER: &str = "\
# 4x4 decoder-only smoke model
mode = decoder-only
layers = 1
d = 16
heads = 2
d_ff = 16
scheme = local1d
l_q = 8
l_m = 8
height = 4
width = 4
steps = 3
warmup = 10
eval_interval = 1
";

const ENCODER_DECODER: &str = "\
mode = encoder-decoder
layers = 1
encoder_layers = 1
d = 16
heads = 2
d_ff = 16
scheme = local2d
h_q = 2
w_q = 2
h_m = 1
w_m = 1
height = 4
width = 4
source_height = 2
source_width = 2
steps = 2
warmup = 10
";

const MASK: &str = "\
layers = 1
scheme = local1d
l_q = 4
l_m = 4
height = 2
width = 2
";

pub struct Fixture {
    dir: tempfile::TempDir,
}

pub fn imgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imgt"))
        .args(args)
        .output()
        .expect("spawn imgt")
}

fn expect_ok(out: &Output, what: &str) -> Result<String, String> {
    if !out.status.success() {
        return Err(format!(
            "{what} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let f = Self { dir };
        std::fs::create_dir(f.path("ppms")).unwrap();
        let mut rng = Rng::new(11);
        for i in 0..8 {
            write_ppm(f.path(&format!("ppms/img{i}.ppm")), &Image::random(4, 4, &mut rng)).unwrap();
        }
        write_ppm(f.path("big.ppm"), &Image::random(8, 8, &mut rng)).unwrap();
        write_ppm(f.path("low.ppm"), &Image::random(2, 2, &mut rng)).unwrap();
        for (name, text) in [("dec.cfg", DECODER), ("encdec.cfg", ENCODER_DECODER), ("mask.cfg", MASK)] {
            std::fs::write(f.path(name), text).unwrap();
        }
        std::fs::write(f.path("typo.cfg"), "laers = 2\n").unwrap();
        f
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn ensure_data(&self) -> Result<(), String> {
        if !self.path("data.imds").exists() {
            expect_ok(&imgt(&["pack", "--dir", &self.p("ppms"), "--out", &self.p("data.imds")]), "pack")?;
        }
        Ok(())
    }

    fn ensure_ckpt(&self, cfg: &str, ckpt: &str) -> Result<String, String> {
        self.ensure_data()?;
        let out = imgt(&["train", "--config", &self.p(cfg), "--data", &self.p("data.imds"), "--out", &self.p(ckpt)]);
        expect_ok(&out, "train")
    }

    pub fn pack(&self) -> Result<(), String> {
        self.ensure_data()?;
        let imgs = read_dataset(self.path("data.imds")).map_err(|e| e.to_string())?;
        check(imgs.len() == 8, format!("packed {} images", imgs.len()))?;
        check(imgs[0] == read_ppm(self.path("ppms/img0.ppm")).unwrap(), "first image differs")
    }

    pub fn train(&self) -> Result<(), String> {
        let stdout = self.ensure_ckpt("dec.cfg", "dec.imgt")?;
        let lines: Vec<&str> = stdout.lines().collect();
        check(lines.len() == 3, format!("expected 3 metrics lines, got {stdout:?}"))?;
        check(lines[0].starts_with("step=1 nll_nats="), format!("bad metrics line {:?}", lines[0]))?;
        check(self.path("dec.imgt").exists(), "no checkpoint written")
    }

    pub fn eval(&self) -> Result<(), String> {
        self.ensure_data()?;
        let cfg = imgt::io::parse_config(DECODER).unwrap().model;
        let mut model = Model32::build(cfg, &mut Rng::new(0)).unwrap();
        for name in ["head.cat.w", "head.cat.b"] {
            let id = model.params().find(name).ok_or(format!("no {name}"))?;
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        save_checkpoint(self.path("uniform.imgt"), &model).unwrap();
        let out = imgt(&["eval", "--ckpt", &self.p("uniform.imgt"), "--data", &self.p("data.imds")]);
        let stdout = expect_ok(&out, "eval")?;
        check(stdout.trim() == "8.0000", format!("uniform head printed {stdout:?}"))
    }

    pub fn sample(&self) -> Result<(), String> {
        if !self.path("dec.imgt").exists() {
            self.ensure_ckpt("dec.cfg", "dec.imgt")?;
        }
        for run in ["s1", "s2"] {
            let out = imgt(&[
                "sample", "--ckpt", &self.p("dec.imgt"), "--n", "2", "--temperature", "1.0", "--seed", "7", "--out", &self.p(run),
            ]);
            expect_ok(&out, "sample")?;
        }
        for i in 0..2 {
            let name = format!("sample_{i:04}.ppm");
            let a = std::fs::read(self.path("s1").join(&name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(self.path("s2").join(&name)).map_err(|e| e.to_string())?;
            check(a == b, format!("{name} differs between runs"))?;
            let img = read_ppm(self.path("s1").join(&name)).map_err(|e| e.to_string())?;
            check(img.dims() == (4, 4), "sample has wrong size")?;
        }
        Ok(())
    }

    pub fn complete(&self) -> Result<(), String> {
        if !self.path("dec.imgt").exists() {
            self.ensure_ckpt("dec.cfg", "dec.imgt")?;
        }
        let input = self.p("ppms/img3.ppm");
        let out = imgt(&[
            "complete", "--ckpt", &self.p("dec.imgt"), "--image", &input, "--prefix", "24", "--temperature", "0.9", "--out", &self.p("done.ppm"),
        ]);
        expect_ok(&out, "complete")?;
        let (a, b) = (read_ppm(&input).unwrap(), read_ppm(self.path("done.ppm")).map_err(|e| e.to_string())?);
        check(a.data()[..24] == b.data()[..24], "prefix not preserved")
    }

    pub fn superres(&self) -> Result<(), String> {
        self.ensure_ckpt("encdec.cfg", "encdec.imgt")?;
        let out = imgt(&[
            "superres", "--ckpt", &self.p("encdec.imgt"), "--low", &self.p("low.ppm"), "--temperature", "1.0", "--out", &self.p("high.ppm"),
        ]);
        expect_ok(&out, "superres")?;
        let img = read_ppm(self.path("high.ppm")).map_err(|e| e.to_string())?;
        check(img.dims() == (4, 4), "super-resolved image has wrong size")
    }

    pub fn inspect_mask(&self) -> Result<(), String> {
        let out = imgt(&["inspect-mask", "--config", &self.p("mask.cfg"), "--block", "0", "--out", &self.p("mask.pgm")]);
        expect_ok(&out, "inspect-mask")?;
        let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mask_1d_lq4_2x2.pgm");
        let want = std::fs::read(golden).map_err(|e| e.to_string())?;
        let got = std::fs::read(self.path("mask.pgm")).map_err(|e| e.to_string())?;
        check(got == want, "mask graymap differs from the golden file")
    }

    pub fn gradcheck(&self) -> Result<(), String> {
        let stdout = expect_ok(&imgt(&["gradcheck", "--config", &self.p("encdec.cfg")]), "gradcheck")?;
        check(stdout.starts_with("max_rel_error="), format!("unexpected output {stdout:?}"))
    }

    pub fn error_codes(&self) -> Result<(), String> {
        if !self.path("dec.imgt").exists() {
            self.ensure_ckpt("dec.cfg", "dec.imgt")?;
        }
        std::fs::create_dir_all(self.path("bigdir")).unwrap();
        std::fs::copy(self.path("big.ppm"), self.path("bigdir/a.ppm")).unwrap();
        expect_ok(&imgt(&["pack", "--dir", &self.p("bigdir"), "--out", &self.p("big.imds")]), "pack")?;
        let cases: [(&str, Vec<String>, i32); 4] = [
            ("unknown flag", vec!["eval".into(), "--bogus".into(), "1".into()], 2),
            ("missing file", vec!["eval".into(), "--ckpt".into(), self.p("nope.imgt"), "--data".into(), self.p("data.imds")], 3),
            ("ckpt/data mismatch", vec!["eval".into(), "--ckpt".into(), self.p("dec.imgt"), "--data".into(), self.p("big.imds")], 4),
            ("unknown config key", vec!["inspect-mask".into(), "--config".into(), self.p("typo.cfg"), "--block".into(), "0".into(), "--out".into(), self.p("x.pgm")], 4),
        ];
        for (what, args, code) in cases {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let got = imgt(&args).status.code();
            check(got == Some(code), format!("{what}: exit {got:?}, want {code}"))?;
        }
        Ok(())
    }
}

/// Every smoke run with its wall time, each in a fresh fixture.
pub fn smoke_suite() -> Vec<(&'static str, Result<(), String>, Duration)> {
    let runs: [(&'static str, fn(&Fixture) -> Result<(), String>); 9] = [
        ("pack", Fixture::pack),
        ("train", Fixture::train),
        ("eval", Fixture::eval),
        ("sample", Fixture::sample),
        ("complete", Fixture::complete),
        ("superres", Fixture::superres),
        ("inspect-mask", Fixture::inspect_mask),
        ("gradcheck", Fixture::gradcheck),
        ("error codes", Fixture::error_codes),
    ];
    runs.into_iter()
        .map(|(name, f)| {
            let fx = Fixture::new();
            let t = Instant::now();
            let r = f(&fx);
            (name, r, t.elapsed())
        })
        .collect()
}
