//! Library side of the `transfig` tool: checkpoint loading, the image editing
//! operations behind each subcommand, and montage output.

use std::path::{Path, PathBuf};

use genegan::eval::EvalError;
use genegan::model::{Inference, LatentCode, ModelConfig, ModelError, ObjectVector};
use genegan::synth::{load_image, save_image, DataError};
use genegan::tensor::Tensor;
use genegan::train::{load_checkpoint, Checkpoint, CheckpointError, TrainError};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration. Exit code 2.
    Usage(String),
    /// Unreadable, malformed or mismatched image data. Exit code 3.
    Data(String),
    /// Missing or corrupt checkpoint. Exit code 4.
    Checkpoint(String),
    /// Anything else that stopped the command. Exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => CliError::Data(d.to_string()),
            EvalError::Input(m) => CliError::Usage(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } | TrainError::UnknownKey { .. } => CliError::Usage(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::Checkpoint(_) => CliError::Checkpoint(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// A checkpoint loaded for inference.
pub struct Model {
    pub checkpoint: Checkpoint,
    pub config: ModelConfig,
}

impl Model {
    /// Reads and CRC-checks a checkpoint.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let checkpoint = load_checkpoint(path).map_err(|e| match e {
            CheckpointError::Io { .. } => CliError::Checkpoint(e.to_string()),
            other => CliError::Checkpoint(format!("{}: {other}", path.display())),
        })?;
        Ok(Self::from_checkpoint(checkpoint))
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Self {
        let config = checkpoint.config.model();
        Self { checkpoint, config }
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn net(&self) -> Inference<'_, f32> {
        Inference::new(&self.checkpoint.params, self.config)
    }

    /// Loads an image and checks it has this model's size.
    pub fn read_image(&self, path: impl AsRef<Path>) -> Result<Tensor<f32>> {
        let path = path.as_ref();
        let img = load_image(path)?;
        self.check_image(&img)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(img)
    }

    pub fn check_image(&self, img: &Tensor<f32>) -> std::result::Result<(), String> {
        let s = self.image_size();
        if img.shape() != [3, s, s] {
            let got = img.shape();
            return Err(format!(
                "image is {}x{}, but the checkpoint was trained on {s}x{s}",
                got.get(2).copied().unwrap_or(0),
                got.get(1).copied().unwrap_or(0)
            ));
        }
        Ok(())
    }

    /// Encodes one `3 x H x W` image.
    pub fn encode(&self, img: &Tensor<f32>) -> Result<LatentCode<f32>> {
        self.check_image(img).map_err(CliError::Data)?;
        let s = self.image_size();
        let batch = img.clone().reshape(&[1, 3, s, s]).map_err(|e| CliError::Failed(e.to_string()))?;
        Ok(self.net().encode(&batch)?)
    }

    /// Decodes a single-sample code to a `3 x H x W` image.
    pub fn decode(&self, code: &LatentCode<f32>) -> Result<Tensor<f32>> {
        let out = self.net().decode(code)?;
        out.select(0).map_err(|e| CliError::Failed(e.to_string()))
    }

    /// The image's own background with `object` in place of its object code.
    pub fn with_object(&self, code: &LatentCode<f32>, object: &ObjectVector) -> Result<Tensor<f32>> {
        let mut c = code.clone();
        c.set_object(0, object)?;
        self.decode(&c)
    }

    pub fn reconstruct(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.decode(&self.encode(img)?)
    }

    pub fn remove(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.decode(&self.encode(img)?.without_object())
    }

    pub fn transplant(&self, donor: &Tensor<f32>, recipient: &Tensor<f32>) -> Result<Tensor<f32>> {
        let object = self.encode(donor)?.object_vector(0, "donor")?;
        self.with_object(&self.encode(recipient)?, &object)
    }

    /// `[Au, B0, A with zero object, B with A's object, reconstructed A,
    /// reconstructed B]`.
    pub fn swap(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let ca = self.encode(a)?;
        let cb = self.encode(b)?;
        let ua = ca.object_vector(0, "a")?;
        let ub = cb.object_vector(0, "b")?;
        Ok(vec![
            a.clone(),
            b.clone(),
            self.with_object(&ca, &ub)?,
            self.with_object(&cb, &ua)?,
            self.decode(&ca)?,
            self.decode(&cb)?,
        ])
    }

    /// The image's background with its object code scaled by each factor.
    pub fn scale(&self, img: &Tensor<f32>, factors: &[f64]) -> Result<Vec<Tensor<f32>>> {
        let code = self.encode(img)?;
        let u = code.object_vector(0, "input")?;
        factors.iter().map(|&t| self.with_object(&code, &u.scale(t))).collect()
    }

    /// Object codes mixed over a path or grid and decoded onto the recipient.
    ///
    /// One donor: `k` frames from the recipient's own object to the donor's.
    /// Two donors: `k` frames from the first to the second. Three donors: a
    /// `k x k` triangle with weights `(1-s-t, t, s)` at row `s` and column `t`,
    /// empty cells past the diagonal. Four donors: a `k x k` bilinear grid with
    /// the donors at the top-left, top-right, bottom-left and bottom-right.
    pub fn interpolate(&self, donors: &[Tensor<f32>], recipient: &Tensor<f32>, k: usize) -> Result<Vec<Vec<Option<Tensor<f32>>>>> {
        if k == 0 {
            return Err(CliError::Usage("--steps must be at least 1".into()));
        }
        if donors.is_empty() || donors.len() > 4 {
            return Err(CliError::Usage(format!("interpolate takes 1 to 4 donors, got {}", donors.len())));
        }
        let code = self.encode(recipient)?;
        let mut objects = Vec::with_capacity(donors.len());
        for (i, d) in donors.iter().enumerate() {
            objects.push(self.encode(d)?.object_vector(0, format!("donor{i}"))?);
        }
        let frac = |i: usize| if k == 1 { 1.0 } else { i as f64 / (k - 1) as f64 };
        let grid_frac = |i: usize| if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
        let render = |v: &ObjectVector| self.with_object(&code, v).map(Some);
        match objects.len() {
            1 => {
                let own = code.object_vector(0, "recipient")?;
                let row = (0..k)
                    .map(|i| render(&ObjectVector::interpolate(&own, &objects[0], frac(i))?))
                    .collect::<Result<_>>()?;
                Ok(vec![row])
            }
            2 => {
                let row = (0..k)
                    .map(|i| render(&ObjectVector::interpolate(&objects[0], &objects[1], grid_frac(i))?))
                    .collect::<Result<_>>()?;
                Ok(vec![row])
            }
            3 => (0..k)
                .map(|r| {
                    (0..k)
                        .map(|c| {
                            if r + c >= k {
                                return Ok(None);
                            }
                            let (s, t) = (grid_frac(r), grid_frac(c));
                            let v = corner_or_mix(&objects, &[(0, 1.0 - s - t), (1, t), (2, s)])?;
                            render(&v)
                        })
                        .collect()
                })
                .collect(),
            _ => (0..k)
                .map(|r| {
                    (0..k)
                        .map(|c| {
                            let (s, t) = (grid_frac(r), grid_frac(c));
                            let w = [(0, (1.0 - s) * (1.0 - t)), (1, (1.0 - s) * t), (2, s * (1.0 - t)), (3, s * t)];
                            render(&corner_or_mix(&objects, &w)?)
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// A weighted mix, returned as the exact donor vector when one weight is 1.
fn corner_or_mix(objects: &[ObjectVector], weights: &[(usize, f64)]) -> Result<ObjectVector> {
    if let Some(&(i, _)) = weights.iter().find(|(_, w)| *w == 1.0) {
        return Ok(objects[i].clone());
    }
    let items: Vec<(&ObjectVector, f64)> = weights.iter().map(|&(i, w)| (&objects[i], w)).collect();
    Ok(ObjectVector::combine(&items)?)
}

/// Lays panels out row by row; `None` cells stay black.
pub fn montage(rows: &[Vec<Option<Tensor<f32>>>]) -> Result<Tensor<f32>> {
    let first = rows
        .iter()
        .flatten()
        .flatten()
        .next()
        .ok_or_else(|| CliError::Failed("montage has no panels".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let (gh, gw) = (h * rows.len(), w * cols);
    let mut data = vec![0f32; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(p) = cell else { continue };
            if p.shape() != [3, h, w] {
                return Err(CliError::Failed(format!("panel shape {:?} differs from {:?}", p.shape(), [3, h, w])));
            }
            for ch in 0..3 {
                for y in 0..h {
                    let src = &p.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                    let at = ch * gh * gw + (r * h + y) * gw + c * w;
                    data[at..at + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(&[3, gh, gw], data).map_err(|e| CliError::Failed(e.to_string()))
}

/// A single row montage.
pub fn montage_row(panels: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    montage(&[panels.into_iter().map(Some).collect()])
}

pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    save_image(path, img).map_err(|e| CliError::Failed(e.to_string()))
}

/// `dir/name`, creating `dir` first.
pub fn output_in(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    Ok(dir.join(name))
}
