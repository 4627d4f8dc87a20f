//! Synthetic data: scenarios, named presets and CSV input/output.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{MaxAffine, PwaModel};
use crate::objective::Dataset;

/// Axis-aligned box the predictors are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl XBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(invalid("box bounds must be nonempty and of equal length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(invalid("box bounds must be finite with lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    /// `[-1, 1]^d`.
    pub fn unit(d: usize) -> Self {
        Self { lower: vec![-1.0; d], upper: vec![1.0; d] }
    }

    pub fn d(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.d() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }
}

/// A data-generating process: `Y = g(X) + sigma Z` with `X` uniform on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: PwaModel,
    pub n: usize,
    pub noise_sd: f64,
    pub x_box: XBox,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("scenario needs n >= 1"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(invalid("noise_sd must be finite and >= 0"));
        }
        if self.x_box.d() != self.model.d() {
            return Err(Error::DimensionMismatch { expected: self.model.d(), got: self.x_box.d() });
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Draws `scenario.n` observations. The same scenario always yields the same
/// dataset.
pub fn generate(scenario: &Scenario) -> Result<Dataset> {
    scenario.validate()?;
    let d = scenario.model.d();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut x = Vec::with_capacity(scenario.n * d);
    let mut y = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let start = x.len();
        for (l, u) in scenario.x_box.lower.iter().zip(&scenario.x_box.upper) {
            x.push(if l < u { rng.random_range(*l..=*u) } else { *l });
        }
        let z: f64 = rng.sample(StandardNormal);
        y.push(scenario.model.eval_unchecked(&x[start..]) + scenario.noise_sd * z);
    }
    Dataset::from_flat(d, x, y)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for stream `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Named scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Two lines meeting at `x = 0.1`, `n = 200`, `sigma = 0.1`.
    BrokenStick200,
    /// Three-minus-two-line zig-zag, `n = 500`, `sigma = 0.1`.
    Example1,
    /// Two random planes in `d = 2, 3, 4` with `n = 10^d`, `sigma = 0.1`.
    Planes(usize),
    /// Fixed pair of planes in `d = 2`, `n = 1000`, noiseless.
    MuStudy,
    /// Convex max of three planes through the origin, `n = 500`, `sigma = 0.1`.
    ThreePlanes,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::BrokenStick200,
        Preset::Example1,
        Preset::Planes(2),
        Preset::Planes(3),
        Preset::Planes(4),
        Preset::MuStudy,
        Preset::ThreePlanes,
    ];

    pub fn name(self) -> String {
        match self {
            Preset::BrokenStick200 => "broken-stick-200".into(),
            Preset::Example1 => "example1-500".into(),
            Preset::Planes(d) => format!("planes-d{d}"),
            Preset::MuStudy => "mu-study".into(),
            Preset::ThreePlanes => "three-planes".into(),
        }
    }

    /// Pieces `(k1, k2)` of the generating model.
    pub fn pieces(self) -> (usize, usize) {
        match self {
            Preset::Example1 => (3, 2),
            Preset::ThreePlanes => (3, 0),
            _ => (2, 0),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                invalid(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

fn convex(rows: &[Vec<f64>]) -> PwaModel {
    PwaModel::convex(MaxAffine::from_rows(rows).expect("preset rows are valid"))
}

/// The scenario behind a preset. For `planes-d*` the planes themselves are
/// drawn from `seed`, independently of the sample. Every preset adds normal
/// noise with standard deviation 0.1 except `mu-study`, which is noiseless.
pub fn preset(p: Preset, seed: u64) -> Result<Scenario> {
    let (model, n, d) = match p {
        Preset::BrokenStick200 => (convex(&[vec![-1.0, 0.0], vec![1.5, -0.25]]), 200, 1),
        Preset::Example1 => {
            let part1 = MaxAffine::from_rows(&[vec![-2.0, -1.0], vec![0.5, 0.0], vec![2.0, -1.0]])?;
            let part2 = MaxAffine::from_rows(&[vec![0.0, 0.0], vec![1.5, -0.45]])?;
            (PwaModel::new(part1, part2)?, 500, 1)
        }
        Preset::Planes(d) => {
            if !(2..=4).contains(&d) {
                return Err(invalid(format!("planes preset needs d in 2..=4, got {d}")));
            }
            (random_plane_pair(d, derive_seed(seed, u64::MAX))?, 10usize.pow(d as u32), d)
        }
        Preset::MuStudy => (convex(&[vec![1.0, 0.5, 0.0], vec![-0.8, -0.6, 0.1]]), 1000, 2),
        Preset::ThreePlanes => (
            convex(&[vec![1.0, 0.0, 0.0], vec![-0.5, 0.8, 0.0], vec![-0.5, -0.8, 0.0]]),
            500,
            2,
        ),
    };
    // the smoothing study samples points on the planes themselves
    let noise_sd = if p == Preset::MuStudy { 0.0 } else { 0.1 };
    Ok(Scenario { model, n, noise_sd, x_box: XBox::unit(d), seed })
}

/// Two planes `z = a_i . x + b_i` whose normals `(a_i, -1)` make an angle of
/// at least 90 degrees and whose intersection crosses `[-1/2, 1/2]^d`.
pub fn random_plane_pair(d: usize, seed: u64) -> Result<PwaModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1_000_000 {
        let mut draw = || -> Vec<f64> { (0..=d).map(|_| rng.random_range(-1.0..=1.0)).collect() };
        let (p1, p2) = (draw(), draw());
        if plane_pair_admissible(&p1, &p2) {
            return Ok(convex(&[p1, p2]));
        }
    }
    Err(Error::Numerical("plane rejection sampler did not terminate".into()))
}

/// Post-hoc check of the plane-pair constraint; rows are `(a_1..a_d, b)`.
pub fn plane_pair_admissible(p1: &[f64], p2: &[f64]) -> bool {
    let d = p1.len() - 1;
    let normal_dot: f64 = p1[..d].iter().zip(&p2[..d]).map(|(a, b)| a * b).sum::<f64>() + 1.0;
    let slope_gap: f64 = p1[..d].iter().zip(&p2[..d]).map(|(a, b)| (a - b).abs()).sum();
    normal_dot <= 0.0 && (p1[d] - p2[d]).abs() <= 0.5 * slope_gap
}

/// Writes `x1,...,xd,y` with shortest round-trip decimals and LF endings.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = (1..=data.d()).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_io)?;
    let mut fields = Vec::with_capacity(data.d() + 1);
    for (x, y) in data.iter() {
        fields.clear();
        fields.extend(x.iter().chain(std::iter::once(&y)).map(|v| format!("{v:?}")));
        w.write_record(&fields).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv { row: 0, column: 0, message: format!("{other:?}") },
    }
}

/// Reads the format produced by [`write_csv`]. Errors name the 1-based line
/// and column of the offending field.
pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| csv_record_error(e, 1))?.clone();
    let cols = header.len();
    let expected: Vec<String> =
        (1..cols).map(|i| format!("x{i}")).chain(std::iter::once("y".to_string())).collect();
    if cols < 2 {
        return Err(Error::Csv { row: 1, column: cols.max(1), message: "need at least columns x1,y".into() });
    }
    for (j, (got, want)) in header.iter().zip(&expected).enumerate() {
        if got.trim() != want {
            return Err(Error::Csv { row: 1, column: j + 1, message: format!("header {got:?}, expected {want:?}") });
        }
    }
    let d = cols - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_record_error(e, line))?;
        if rec.len() != cols {
            return Err(Error::Csv {
                row: line,
                column: rec.len().min(cols) + 1,
                message: format!("{} fields, expected {cols}", rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v = f64::from_str(field.trim()).map_err(|_| Error::Csv {
                row: line,
                column: j + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { row: line, column: j + 1, message: format!("non-finite value {field:?}") });
            }
            if j < d {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Csv { row: 2, column: 1, message: "no data rows".into() });
    }
    Dataset::from_flat(d, x, y)
}

fn csv_record_error(e: csv::Error, line: usize) -> Error {
    let row = e.position().map_or(line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { len, expected_len, .. } => Error::Csv {
            row,
            column: len.min(expected_len) as usize + 1,
            message: format!("{len} fields, expected {expected_len}"),
        },
        csv::ErrorKind::Utf8 { err, .. } => Error::Csv { row, column: err.field() + 1, message: "invalid UTF-8".into() },
        other => Error::Csv { row, column: 1, message: format!("{other:?}") },
    }
}

pub fn write_csv_file(data: &Dataset, path: &Path) -> Result<()> {
    write_csv(data, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_csv_file(path: &Path) -> Result<Dataset> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::empirical_norm;
    use proptest::prelude::*;

    #[test]
    fn noiseless_generation_is_exact() {
        let s = Scenario { noise_sd: 0.0, ..preset(Preset::Example1, 4).unwrap() };
        let data = generate(&s).unwrap();
        assert_eq!(data.n(), 500);
        assert_eq!(empirical_norm(&s.model, &data).unwrap(), 0.0);
    }

    #[test]
    fn noise_variance_law_of_large_numbers() {
        let s = Scenario { n: 10_000, ..preset(Preset::ThreePlanes, 9).unwrap() };
        let data = generate(&s).unwrap();
        let msd = empirical_norm(&s.model, &data).unwrap();
        assert!((0.009..=0.011).contains(&msd), "{msd}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = preset(Preset::BrokenStick200, 7).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&generate(&s).unwrap(), &mut a).unwrap();
        write_csv(&generate(&s).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_csv(&generate(&s.with_seed(8)).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn preset_shapes() {
        let s = preset(Preset::BrokenStick200, 0).unwrap();
        assert_eq!((s.model.d(), s.n, s.noise_sd, s.model.k1()), (1, 200, 0.1, 2));
        let s = preset(Preset::Planes(3), 0).unwrap();
        assert_eq!((s.model.d(), s.n), (3, 1000));
        let s = preset(Preset::MuStudy, 0).unwrap();
        assert_eq!((s.model.d(), s.n, s.noise_sd), (2, 1000, 0.0));
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            let s = preset(p, 1).unwrap();
            assert_eq!((s.model.k1(), s.model.k2().max(1)), (p.pieces().0, p.pieces().1.max(1)));
        }
        assert!("planes-d5".parse::<Preset>().is_err());
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn example1_uses_every_line() {
        let m = preset(Preset::Example1, 0).unwrap().model;
        let mut seen1 = [false; 3];
        let mut seen2 = [false; 2];
        for i in 0..=200 {
            let x = [-1.0 + f64::from(i) / 100.0];
            seen1[m.part1().argmax(&x)] = true;
            seen2[m.part2().argmax(&x)] = true;
        }
        assert!(seen1.iter().chain(&seen2).all(|&s| s));
    }

    #[test]
    fn plane_presets_satisfy_constraint() {
        for d in 2..=4 {
            for seed in 0..20 {
                let m = preset(Preset::Planes(d), seed).unwrap().model;
                assert!(plane_pair_admissible(m.part1().row(0), m.part1().row(1)));
                // the kink set meets the sample box: both planes win somewhere
                let data = generate(&Scenario { n: 2000, ..preset(Preset::Planes(d), seed).unwrap() }).unwrap();
                let wins = data.iter().filter(|(x, _)| m.part1().argmax(x) == 0).count();
                assert!(wins > 0 && wins < data.n());
            }
        }
        let m = preset(Preset::MuStudy, 0).unwrap().model;
        assert!(plane_pair_admissible(m.part1().row(0), m.part1().row(1)));
    }

    #[test]
    fn csv_layout() {
        let data = Dataset::from_rows(&[vec![0.1, -2.0], vec![1e-300, 3.5]], vec![0.3, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x1,x2,y\n0.1,-2.0,0.3\n1e-300,3.5,-0.0\n");
    }

    #[test]
    fn csv_diagnostics() {
        let err = read_csv("x1,y\n1,2\n3,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, column: 2, .. }), "{err:?}");
        let err = read_csv("x1,y\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, .. }), "{err:?}");
        let err = read_csv("a,y\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 1, column: 1, .. }), "{err:?}");
        let err = read_csv("x1,y\n1,NaN\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 2, column: 2, .. }), "{err:?}");
        assert!(read_csv("x1,y\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 3), 1..20)
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| r[..2].to_vec()).collect();
            let y: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            let data = Dataset::from_rows(&x, y).unwrap();
            let mut buf = Vec::new();
            write_csv(&data, &mut buf).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            let bits = |d: &Dataset| d.predictors().iter().chain(d.responses()).map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&data));
        }

        #[test]
        fn generated_points_lie_in_the_box(seed in any::<u64>(), lo in -3.0..0.0f64, width in 0.0..4.0f64) {
            let model = convex(&[vec![1.0, -1.0, 0.0], vec![0.0, 2.0, 1.0]]);
            let x_box = XBox::new(vec![lo, lo], vec![lo + width, lo + width]).unwrap();
            let s = Scenario { model, n: 50, noise_sd: 0.5, x_box: x_box.clone(), seed };
            let data = generate(&s).unwrap();
            for (x, y) in data.iter() {
                prop_assert!(x_box.contains(x));
                prop_assert!(y.is_finite());
            }
        }
    }
}
