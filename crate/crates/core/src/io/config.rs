use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::DriverConfig;
use crate::error::{Error, Result};
use crate::fem::{BoundarySpec, MaterialField, Mesh2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub poisson: f64,
}

/// Region of the phantom with its own log-modulus. An element belongs to a
/// shape when its centre does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Rectangle { x0: f64, x1: f64, y0: f64, y1: f64, value: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, value: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rectangle { x0, x1, y0, y1, .. } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Shape::Rectangle { value, .. } | Shape::Ellipse { value, .. } => value,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rectangle { x0, x1, y0, y1, .. } => (x0, x1, y0, y1),
            Shape::Ellipse { cx, cy, rx, ry, .. } => (cx - rx, cx + rx, cy - ry, cy + ry),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Log-modulus outside every shape.
    pub background: f64,
    /// Later shapes override earlier ones.
    #[serde(default)]
    pub shapes: Vec<Shape>,
    /// Hold the top row of elements at the true values.
    #[serde(default)]
    pub clamp_top_row: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BcConfig {
    /// Bottom edge fixed, top edge displaced vertically by `top_uy`.
    Platen { top_uy: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Signal-to-noise power ratio `mean(y^2) / sigma^2`; absent for
    /// noise-free data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub enabled: bool,
    pub a_phi: f64,
    pub b_phi: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            a_phi: 0.0,
            b_phi: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(flatten)]
    pub driver: DriverConfig,
    #[serde(default)]
    pub smoothing: SmoothingConfig,
    /// Uniform starting log-modulus; defaults to the mean clamped value,
    /// or the background when nothing is clamped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_log_modulus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write CSV tables next to the JSON documents.
    #[serde(default = "yes")]
    pub csv: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    pub phantom: PhantomConfig,
    pub bc: BcConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Benchmark: 10 x 10 elements on a 10 x 10 domain,
    /// nu = 0, a stiff circular inclusion five times the matrix modulus,
    /// 1% platen compression, SNR 1e5, known top row.
    pub fn example1() -> Self {
        let matrix = 10.0_f64.ln();
        Self {
            mesh: MeshConfig {
                nx: 10,
                ny: 10,
                lx: 10.0,
                ly: 10.0,
                poisson: 0.0,
            },
            phantom: PhantomConfig {
                background: matrix,
                shapes: vec![Shape::Ellipse {
                    cx: 5.0,
                    cy: 5.0,
                    rx: 2.5,
                    ry: 2.5,
                    value: matrix + 5.0_f64.ln(),
                }],
                clamp_top_row: true,
            },
            bc: BcConfig::Platen { top_uy: -0.1 },
            noise: NoiseConfig {
                snr: Some(1e5),
                seed: 2024,
            },
            solver: SolverConfig::default(),
            validation: ValidationConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mesh;
        Mesh2D::new(m.nx, m.ny, m.lx, m.ly)?;
        if !(m.poisson > -1.0 && m.poisson < 0.5) {
            return Err(Error::InvalidInput(format!("Poisson ratio {} outside (-1, 0.5)", m.poisson)));
        }
        if !self.phantom.background.is_finite() {
            return Err(Error::InvalidInput("background log-modulus must be finite".into()));
        }
        for (i, s) in self.phantom.shapes.iter().enumerate() {
            let (x0, x1, y0, y1) = s.bounds();
            let finite = [x0, x1, y0, y1, s.value()].iter().all(|v| v.is_finite());
            if !finite || x0 > x1 || y0 > y1 {
                return Err(Error::InvalidInput(format!("shape {i} is malformed")));
            }
            if x0 < 0.0 || y0 < 0.0 || x1 > m.lx || y1 > m.ly {
                return Err(Error::InvalidInput(format!("shape {i} extends outside the domain")));
            }
        }
        let BcConfig::Platen { top_uy } = self.bc;
        if !top_uy.is_finite() {
            return Err(Error::InvalidInput("top displacement must be finite".into()));
        }
        if let Some(snr) = self.noise.snr {
            if !(snr > 0.0) || snr.is_infinite() {
                return Err(Error::InvalidInput(format!("snr must be positive and finite, got {snr}")));
            }
        }
        if self.validation.samples < 2 {
            return Err(Error::InvalidInput("validation needs at least 2 samples".into()));
        }
        if let Some(v) = self.solver.initial_log_modulus {
            if !v.is_finite() {
                return Err(Error::InvalidInput("initial log-modulus must be finite".into()));
            }
        }
        self.solver.driver.validate()
    }

    pub fn mesh(&self) -> Result<Mesh2D> {
        Mesh2D::new(self.mesh.nx, self.mesh.ny, self.mesh.lx, self.mesh.ly)
    }

    pub fn boundary(&self, mesh: &Mesh2D) -> BoundarySpec {
        let BcConfig::Platen { top_uy } = self.bc;
        BoundarySpec::platen_compression(mesh, top_uy)
    }

    /// True field of the phantom, with the clamp mask applied.
    pub fn phantom_field(&self, mesh: &Mesh2D) -> Result<MaterialField> {
        let n = mesh.n_elements();
        let mut psi = vec![self.phantom.background; n];
        for (k, v) in psi.iter_mut().enumerate() {
            let (x, y) = mesh.element_center(k);
            for s in &self.phantom.shapes {
                if s.contains(x, y) {
                    *v = s.value();
                }
            }
        }
        let mut mask = vec![false; n];
        if self.phantom.clamp_top_row {
            for ex in 0..mesh.nx {
                mask[mesh.element(ex, mesh.ny - 1)] = true;
            }
        }
        MaterialField::new(psi, mask)
    }

    /// Starting field for inference: clamped entries keep their true values,
    /// free entries start uniform.
    pub fn initial_field(&self, truth: &MaterialField) -> Result<MaterialField> {
        let clamped: Vec<f64> = truth
            .psi
            .iter()
            .zip(&truth.fixed_mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect();
        let start = self.solver.initial_log_modulus.unwrap_or(if clamped.is_empty() {
            self.phantom.background
        } else {
            clamped.iter().sum::<f64>() / clamped.len() as f64
        });
        let free = vec![start; truth.free_indices().len()];
        truth.with_free_values(&free)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_round_trips_through_toml() {
        let cfg = RunConfig::example1();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text, "memory").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn example_phantom_has_a_stiff_inclusion_and_a_clamped_top_row() {
        let cfg = RunConfig::example1();
        let mesh = cfg.mesh().unwrap();
        let f = cfg.phantom_field(&mesh).unwrap();
        assert_eq!(f.free_indices().len(), 90);
        let ratio = (f.psi.iter().copied().fold(f64::MIN, f64::max) - cfg.phantom.background).exp();
        assert!((ratio - 5.0).abs() < 1e-12);
        let inside = f.psi.iter().filter(|v| **v > cfg.phantom.background).count();
        assert!(inside > 5 && inside < 40, "{inside} inclusion elements");
    }

    #[test]
    fn shapes_outside_the_domain_are_rejected() {
        let mut cfg = RunConfig::example1();
        cfg.phantom.shapes.push(Shape::Rectangle {
            x0: 8.0,
            x1: 11.0,
            y0: 0.0,
            y1: 1.0,
            value: 1.0,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let text = r#"
            [mesh]
            nx = 2
            ny = 2
            lx = 1.0
            ly = 1.0
            poisson = 0.2

            [phantom]
            background = 0.0

            [bc]
            kind = "platen"
            top_uy = -0.01

            [noise]
            seed = 3
        "#;
        let cfg = RunConfig::from_toml_str(text, "inline").unwrap();
        assert_eq!(cfg.noise.snr, None);
        assert_eq!(cfg.solver.driver, DriverConfig::default());
        assert!(cfg.solver.smoothing.enabled);
    }

    #[test]
    fn nonpositive_snr_is_rejected() {
        let mut cfg = RunConfig::example1();
        cfg.noise.snr = Some(0.0);
        assert!(cfg.validate().is_err());
    }
}
