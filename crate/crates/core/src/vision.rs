//! Vision encoder: strided conv stem plus guided context attention (GCA).
//!
//! GCA on a feature map `F_R [H×W×C]`:
//!
//! 1. spatial context: `α = softmax_j(F_R[j]·W_r)`, `F_s = Σ_j α_j F_R[j]`
//! 2. channel context: `F_c = F_R ⊕ W_2·LN(ReLU(W_1·F_s))`, broadcast over
//!    positions
//! 3. gate: `g = σ(W_ψ·ReLU(Q_c·W_qc + K_c·W_kc + b_qk) + b_ψ)`, one scalar per
//!    position, and `F_gca = g ⊙ V_c`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_weight, LayerNorm, Linear};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Rng, Tensor, Var};

const STEM_KERNEL: usize = 3;
const STEM_STRIDE: usize = 2;
const STEM_PAD: usize = 1;

/// Spatial size after `layers` stride-2, 3×3, pad-1 convolutions.
pub fn stem_output_size(mut size: usize, layers: usize) -> usize {
    for _ in 0..layers {
        size = (size + 2 * STEM_PAD - STEM_KERNEL) / STEM_STRIDE + 1;
    }
    size
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[(3·3·c_in) × c_out]`, rows ordered (ky, kx, c_in).
    pub kernel: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

/// Stride-2 3×3 conv + ReLU layers mapping `[S×S×3]` images to `[s×s×C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStemParams {
    pub image_size: usize,
    pub layers: Vec<ConvLayer>,
}

impl ConvStemParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        image_size: usize,
        num_layers: usize,
        channels: usize,
    ) -> Result<Self> {
        if num_layers == 0 || channels == 0 || image_size < STEM_KERNEL {
            return Err(Error::config(format!(
                "conv stem needs >= 1 layer, >= 1 channel and image >= {STEM_KERNEL}px"
            )));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut c_in = 3;
        for i in 0..num_layers {
            let fan_in = STEM_KERNEL * STEM_KERNEL * c_in;
            layers.push(ConvLayer {
                kernel: store.add(
                    format!("stem.{i}.kernel"),
                    init_weight(rng, fan_in, channels),
                )?,
                bias: store.add(format!("stem.{i}.bias"), Tensor::zeros(vec![channels]))?,
                c_in,
                c_out: channels,
            });
            c_in = channels;
        }
        Ok(ConvStemParams { image_size, layers })
    }

    pub fn output_size(&self) -> usize {
        stem_output_size(self.image_size, self.layers.len())
    }
}

/// Applies the stem to an `[S×S×3]` image.
pub fn conv_stem_forward<T: Element>(
    g: &mut Graph<'_, T>,
    image: Var,
    params: &ConvStemParams,
) -> Result<Var> {
    let s = g.shape(image);
    if s != [params.image_size, params.image_size, 3] {
        return Err(Error::config(format!(
            "image shape {s:?} does not match configured [{0}, {0}, 3]",
            params.image_size
        )));
    }
    let mut x = image;
    let mut size = params.image_size;
    for layer in &params.layers {
        size = stem_output_size(size, 1);
        let cols = g.im2col(x, STEM_KERNEL, STEM_STRIDE, STEM_PAD)?;
        let k = g.param(layer.kernel)?;
        let y = g.matmul(cols, k)?;
        let b = g.param(layer.bias)?;
        let y = g.add(y, b)?;
        let y = g.relu(y)?;
        x = g.reshape(y, &[size, size, layer.c_out])?;
    }
    Ok(x)
}

/// How the gate's query, key and value derive from `F_R` and `F_c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkvWiring {
    /// `Q_c = F_c`, `K_c = F_R`, `V_c = F_R`.
    #[default]
    RefinedQuery,
    /// `Q_c = K_c = V_c = F_c`.
    AllRefined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcaParams {
    pub channels: usize,
    pub w_r: ParamId,
    pub w1: Linear,
    pub ln: LayerNorm,
    pub w2: Linear,
    pub w_qc: ParamId,
    pub w_kc: ParamId,
    pub b_qk: ParamId,
    pub w_psi: ParamId,
    pub b_psi: ParamId,
    pub wiring: QkvWiring,
}

impl GcaParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        channels: usize,
        reduction: usize,
        c_att: usize,
        wiring: QkvWiring,
        ln_eps: f64,
    ) -> Result<Self> {
        if reduction == 0 || channels / reduction == 0 || c_att == 0 {
            return Err(Error::config(format!(
                "gca: bottleneck {channels}/{reduction} and c_att {c_att} must be >= 1"
            )));
        }
        let hidden = channels / reduction;
        Ok(GcaParams {
            channels,
            w_r: store.add("gca.w_r", init_weight(rng, channels, 1))?,
            w1: Linear::new(store, rng, "gca.w1", channels, hidden, false)?,
            ln: LayerNorm::new(store, "gca.ln", hidden, ln_eps)?,
            w2: Linear::new(store, rng, "gca.w2", hidden, channels, false)?,
            w_qc: store.add("gca.w_qc", init_weight(rng, channels, c_att))?,
            w_kc: store.add("gca.w_kc", init_weight(rng, channels, c_att))?,
            b_qk: store.add("gca.b_qk", Tensor::zeros(vec![c_att]))?,
            w_psi: store.add("gca.w_psi", init_weight(rng, c_att, 1))?,
            b_psi: store.add("gca.b_psi", Tensor::zeros(vec![1]))?,
            wiring,
        })
    }
}

fn flatten_map<T: Element>(g: &mut Graph<'_, T>, f_r: Var) -> Result<(Var, [usize; 3])> {
    let s = g.shape(f_r).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "feature map must be [H, W, C]".into(),
        });
    }
    let flat = g.reshape(f_r, &[s[0] * s[1], s[2]])?;
    Ok((flat, [s[0], s[1], s[2]]))
}

/// Attention pooling over positions. Takes the flattened map `[HW × C]` and
/// returns `F_s [1 × C]` and the pooling weights `α [HW × 1]`.
pub fn spatial_context<T: Element>(
    g: &mut Graph<'_, T>,
    flat: Var,
    w_r: ParamId,
) -> Result<(Var, Var)> {
    let w = g.param(w_r)?;
    let logits = g.matmul(flat, w)?;
    let alpha = g.softmax(logits, 0)?;
    let at = g.transpose(alpha)?;
    let f_s = g.matmul(at, flat)?;
    Ok((f_s, alpha))
}

/// `F_c = F_R ⊕ W_2·LN(ReLU(W_1·F_s))` on flattened `[HW × C]` features.
pub fn channel_context<T: Element>(
    g: &mut Graph<'_, T>,
    flat: Var,
    f_s: Var,
    p: &GcaParams,
) -> Result<Var> {
    let h = p.w1.forward(g, f_s)?;
    let h = g.relu(h)?;
    let h = p.ln.forward(g, h)?;
    let t = p.w2.forward(g, h)?;
    g.add(flat, t)
}

/// Per-position sigmoid gate applied to `V_c`; all inputs `[HW × C]`.
/// Returns `(F_gca [HW × C], gate [HW × 1])`.
pub fn guided_gate<T: Element>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    p: &GcaParams,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq != sk || sk != sv {
        return Err(Error::Shape {
            op: "guided_gate",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let wq = g.param(p.w_qc)?;
    let wk = g.param(p.w_kc)?;
    let a = g.matmul(q, wq)?;
    let b = g.matmul(k, wk)?;
    let s = g.add(a, b)?;
    let bqk = g.param(p.b_qk)?;
    let s = g.add(s, bqk)?;
    let s = g.relu(s)?;
    let wpsi = g.param(p.w_psi)?;
    let s = g.matmul(s, wpsi)?;
    let bpsi = g.param(p.b_psi)?;
    let s = g.add(s, bpsi)?;
    let gate = g.sigmoid(s)?;
    let out = g.mul(v, gate)?;
    Ok((out, gate))
}

pub struct GcaOutput {
    /// `[H × W × C]`
    pub f_gca: Var,
    /// `[H × W]`, values in (0, 1)
    pub gate: Var,
    /// Spatial pooling weights `[HW × 1]`.
    pub alpha: Var,
    /// Channel-context map `[HW × C]`.
    pub f_c: Var,
}

/// Full GCA block on `F_R [H × W × C]`.
pub fn gca_forward<T: Element>(g: &mut Graph<'_, T>, f_r: Var, p: &GcaParams) -> Result<GcaOutput> {
    let (flat, [h, w, c]) = flatten_map(g, f_r)?;
    if c != p.channels {
        return Err(Error::Shape {
            op: "gca_forward",
            lhs: vec![h, w, c],
            rhs: vec![p.channels],
        });
    }
    let (f_s, alpha) = spatial_context(g, flat, p.w_r)?;
    let f_c = channel_context(g, flat, f_s, p)?;
    let (q, k, v) = match p.wiring {
        QkvWiring::RefinedQuery => (f_c, flat, flat),
        QkvWiring::AllRefined => (f_c, f_c, f_c),
    };
    let (out, gate) = guided_gate(g, q, k, v, p)?;
    let f_gca = g.reshape(out, &[h, w, c])?;
    let gate = g.reshape(gate, &[h, w])?;
    Ok(GcaOutput {
        f_gca,
        gate,
        alpha,
        f_c,
    })
}

/// Per-position gate values ready for export.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, each in [0, 1].
    pub values: Vec<f64>,
    pub sample_id: String,
    pub checkpoint_id: String,
}

impl GateMap {
    pub fn from_tensor<T: Element>(
        gate: &Tensor<T>,
        sample_id: &str,
        checkpoint_id: &str,
    ) -> Result<Self> {
        let s = gate.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "gate map must be [H, W]".into(),
            });
        }
        let values = gate.to_f64_vec();
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("gate value {v} outside [0, 1]")));
        }
        Ok(GateMap {
            height: s[0],
            width: s[1],
            values,
            sample_id: sample_id.to_string(),
            checkpoint_id: checkpoint_id.to_string(),
        })
    }

    /// 8-bit levels, `round(255·g)` with halves rounded up.
    pub fn quantized(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn stats(&self) -> (f64, f64, f64) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        (min, max, mean)
    }
}

/// Path of the statistics file written next to a heatmap.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes the gate as a binary PGM (P5) plus a `<path>.txt` sidecar holding
/// provenance and min/max/mean.
pub fn export_gate_map(gate: &GateMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", gate.width, gate.height).into_bytes();
    bytes.extend(gate.quantized());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let (min, max, mean) = gate.stats();
    let mut meta = String::new();
    let _ = writeln!(meta, "sample: {}", gate.sample_id);
    let _ = writeln!(meta, "checkpoint: {}", gate.checkpoint_id);
    let _ = writeln!(meta, "size: {}x{}", gate.width, gate.height);
    let _ = writeln!(meta, "min: {min:.6}");
    let _ = writeln!(meta, "max: {max:.6}");
    let _ = writeln!(meta, "mean: {mean:.6}");
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(side, e))
}

/// Reads a binary PGM written by [`export_gate_map`]: `(width, height, levels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    // Header is four whitespace-separated fields followed by one whitespace byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?;
    if data.len() != w * h {
        return Err(bad("pixel count mismatch"));
    }
    Ok((w, h, data.to_vec()))
}

/// Stem (when images are ingested) followed by GCA.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub stem: Option<ConvStemParams>,
    pub gca: GcaParams,
}

impl VisionEncoder {
    /// `visual` is an `[S×S×3]` image when a stem is configured, otherwise a
    /// precomputed `[H×W×C]` feature map.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, visual: Var) -> Result<GcaOutput> {
        let f_r = match &self.stem {
            Some(stem) => conv_stem_forward(g, visual, stem)?,
            None => visual,
        };
        gca_forward(g, f_r, &self.gca)
    }
}
