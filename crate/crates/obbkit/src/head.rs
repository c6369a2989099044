//! Forward pass of the conformer proposal head: a vanilla 3x3 convolution
//! branch, a dilated convolution branch, and multi-head self-attention over
//! the flattened spatial tokens, concatenated back to the input channel
//! width and projected into classification and regression maps.
//!
//! The channel split is a quarter each for the two convolution branches and
//! half for attention. Attention carries no positional encoding, so it is
//! permutation-equivariant over tokens; the convolutions keep their local
//! receptive fields while attention sees the whole map.

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite value in tensor")]
    NonFinite,
}

/// Dense feature map with dims `(batch, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array4<f64>,
}

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self, HeadError> {
        let (n, c, h, w) = data.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(HeadError::DimensionMismatch("all dims must be >= 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        Ok(FeatureMap { data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        FeatureMap { data: Array4::zeros((n, c, h, w)) }
    }

    /// Uniform values in `[-1, 1)`, seeded.
    pub fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_simple_fn((n, c, h, w), || rng.gen_range(-1.0..1.0));
        FeatureMap { data }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }
}

fn tensor_from(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor { shape, data }
}

/// Flat tensor-with-shape representation used by the JSON parameter bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn into_array4(self) -> Result<Array4<f64>, HeadError> {
        let [a, b, c, d]: [usize; 4] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| HeadError::DimensionMismatch("expected a rank-4 tensor".into()))?;
        Array4::from_shape_vec((a, b, c, d), self.data)
            .map_err(|e| HeadError::DimensionMismatch(e.to_string()))
    }

    fn into_array2(self) -> Result<Array2<f64>, HeadError> {
        let [a, b]: [usize; 2] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| HeadError::DimensionMismatch("expected a rank-2 tensor".into()))?;
        Array2::from_shape_vec((a, b), self.data)
            .map_err(|e| HeadError::DimensionMismatch(e.to_string()))
    }
}

/// Convolution weights: kernel `(C_out, C_in, k, k)` with odd `k`, per-output
/// bias, and a dilation factor spreading the sampling grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConvParamsRepr", into = "ConvParamsRepr")]
pub struct ConvParams {
    kernel: Array4<f64>,
    bias: Vec<f64>,
    dilation: usize,
}

#[derive(Serialize, Deserialize)]
struct ConvParamsRepr {
    kernel: Tensor,
    bias: Vec<f64>,
    dilation: usize,
}

impl TryFrom<ConvParamsRepr> for ConvParams {
    type Error = HeadError;
    fn try_from(r: ConvParamsRepr) -> Result<Self, HeadError> {
        ConvParams::new(r.kernel.into_array4()?, r.bias, r.dilation)
    }
}

impl From<ConvParams> for ConvParamsRepr {
    fn from(p: ConvParams) -> Self {
        let shape = vec![p.kernel.dim().0, p.kernel.dim().1, p.kernel.dim().2, p.kernel.dim().3];
        ConvParamsRepr {
            kernel: tensor_from(shape, p.kernel.into_iter().collect()),
            bias: p.bias,
            dilation: p.dilation,
        }
    }
}

impl ConvParams {
    pub fn new(kernel: Array4<f64>, bias: Vec<f64>, dilation: usize) -> Result<Self, HeadError> {
        let (c_out, _c_in, kh, kw) = kernel.dim();
        if kh != kw || kh.is_multiple_of(2) {
            return Err(HeadError::InvalidParams(format!("kernel must be odd square, got {kh}x{kw}")));
        }
        if dilation < 1 {
            return Err(HeadError::InvalidParams("dilation must be >= 1".into()));
        }
        if bias.len() != c_out {
            return Err(HeadError::ChannelMismatch(format!(
                "bias length {} != C_out {c_out}",
                bias.len()
            )));
        }
        if kernel.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        Ok(ConvParams { kernel, bias, dilation })
    }

    pub fn c_in(&self) -> usize {
        self.kernel.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.kernel.dim().0
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dim().2
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    fn seeded(c_out: usize, c_in: usize, k: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        let kernel = Array4::from_shape_simple_fn((c_out, c_in, k, k), || rng.gen_range(-0.1..0.1));
        let bias = (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
        ConvParams { kernel, bias, dilation }
    }
}

/// Per-head attention projections. Each head owns its query/key/value maps
/// `(C_in, d_k)` and output map `(d_k, C_out)`; head outputs are combined by
/// summing their projections, which equals concatenation followed by one
/// stacked output matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MhsaParamsRepr", into = "MhsaParamsRepr")]
pub struct MHSAParams {
    proj_q: Vec<Array2<f64>>,
    proj_k: Vec<Array2<f64>>,
    proj_v: Vec<Array2<f64>>,
    proj_out: Vec<Array2<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MhsaParamsRepr {
    proj_q: Vec<Tensor>,
    proj_k: Vec<Tensor>,
    proj_v: Vec<Tensor>,
    proj_out: Vec<Tensor>,
    bias: Vec<f64>,
}

impl TryFrom<MhsaParamsRepr> for MHSAParams {
    type Error = HeadError;
    fn try_from(r: MhsaParamsRepr) -> Result<Self, HeadError> {
        let unpack = |ts: Vec<Tensor>| -> Result<Vec<Array2<f64>>, HeadError> {
            ts.into_iter().map(Tensor::into_array2).collect()
        };
        MHSAParams::new(
            unpack(r.proj_q)?,
            unpack(r.proj_k)?,
            unpack(r.proj_v)?,
            unpack(r.proj_out)?,
            r.bias,
        )
    }
}

impl From<MHSAParams> for MhsaParamsRepr {
    fn from(p: MHSAParams) -> Self {
        let pack = |ms: &[Array2<f64>]| -> Vec<Tensor> {
            ms.iter()
                .map(|m| tensor_from(vec![m.dim().0, m.dim().1], m.iter().copied().collect()))
                .collect()
        };
        MhsaParamsRepr {
            proj_q: pack(&p.proj_q),
            proj_k: pack(&p.proj_k),
            proj_v: pack(&p.proj_v),
            proj_out: pack(&p.proj_out),
            bias: p.bias,
        }
    }
}

impl MHSAParams {
    pub fn new(
        proj_q: Vec<Array2<f64>>,
        proj_k: Vec<Array2<f64>>,
        proj_v: Vec<Array2<f64>>,
        proj_out: Vec<Array2<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self, HeadError> {
        let n_heads = proj_q.len();
        if n_heads == 0 {
            return Err(HeadError::InvalidParams("need at least one head".into()));
        }
        if proj_k.len() != n_heads || proj_v.len() != n_heads || proj_out.len() != n_heads {
            return Err(HeadError::InvalidParams("per-head projection counts differ".into()));
        }
        let (c_in, d_k) = proj_q[0].dim();
        let c_out = proj_out[0].dim().1;
        for h in 0..n_heads {
            for m in [&proj_q[h], &proj_k[h], &proj_v[h]] {
                if m.dim() != (c_in, d_k) {
                    return Err(HeadError::DimensionMismatch(format!(
                        "head {h} projection is {:?}, expected ({c_in}, {d_k})",
                        m.dim()
                    )));
                }
            }
            if proj_out[h].dim() != (d_k, c_out) {
                return Err(HeadError::DimensionMismatch(format!(
                    "head {h} output map is {:?}, expected ({d_k}, {c_out})",
                    proj_out[h].dim()
                )));
            }
        }
        if bias.len() != c_out {
            return Err(HeadError::ChannelMismatch(format!(
                "bias length {} != C_out {c_out}",
                bias.len()
            )));
        }
        let all = proj_q.iter().chain(&proj_k).chain(&proj_v).chain(&proj_out);
        if all.flat_map(|m| m.iter()).chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        Ok(MHSAParams { proj_q, proj_k, proj_v, proj_out, bias })
    }

    pub fn n_heads(&self) -> usize {
        self.proj_q.len()
    }

    pub fn d_k(&self) -> usize {
        self.proj_q[0].dim().1
    }

    pub fn c_in(&self) -> usize {
        self.proj_q[0].dim().0
    }

    pub fn c_out(&self) -> usize {
        self.proj_out[0].dim().1
    }

    fn seeded(c_in: usize, c_out: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, HeadError> {
        if !c_out.is_multiple_of(n_heads) {
            return Err(HeadError::InvalidParams(format!(
                "attention width {c_out} not divisible by {n_heads} heads"
            )));
        }
        let d_k = c_out / n_heads;
        let mk = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-0.1..0.1))
        };
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut o = Vec::new();
        for _ in 0..n_heads {
            q.push(mk(c_in, d_k, rng));
            k.push(mk(c_in, d_k, rng));
            v.push(mk(c_in, d_k, rng));
            o.push(mk(d_k, c_out, rng));
        }
        let bias = (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
        MHSAParams::new(q, k, v, o, bias)
    }
}

/// Full parameter set of the head. The channel budget is enforced here:
/// both convolution branches emit `C/4`, attention emits `C/2`, and every
/// branch plus the two projections reads a `C`-channel input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HeadParamsRepr", into = "HeadParamsRepr")]
pub struct HeadParams {
    pub conv_vanilla: ConvParams,
    pub conv_dilated: ConvParams,
    pub mhsa: MHSAParams,
    pub cls_proj: ConvParams,
    pub reg_proj: ConvParams,
}

#[derive(Serialize, Deserialize)]
struct HeadParamsRepr {
    conv_vanilla: ConvParams,
    conv_dilated: ConvParams,
    mhsa: MHSAParams,
    cls_proj: ConvParams,
    reg_proj: ConvParams,
}

impl TryFrom<HeadParamsRepr> for HeadParams {
    type Error = HeadError;
    fn try_from(r: HeadParamsRepr) -> Result<Self, HeadError> {
        HeadParams::new(r.conv_vanilla, r.conv_dilated, r.mhsa, r.cls_proj, r.reg_proj)
    }
}

impl From<HeadParams> for HeadParamsRepr {
    fn from(p: HeadParams) -> Self {
        HeadParamsRepr {
            conv_vanilla: p.conv_vanilla,
            conv_dilated: p.conv_dilated,
            mhsa: p.mhsa,
            cls_proj: p.cls_proj,
            reg_proj: p.reg_proj,
        }
    }
}

impl HeadParams {
    pub fn new(
        conv_vanilla: ConvParams,
        conv_dilated: ConvParams,
        mhsa: MHSAParams,
        cls_proj: ConvParams,
        reg_proj: ConvParams,
    ) -> Result<Self, HeadError> {
        let c = conv_vanilla.c_in();
        if !c.is_multiple_of(4) {
            return Err(HeadError::InvalidParams(format!("channels {c} not divisible by 4")));
        }
        let quarters = [
            ("vanilla C_out", conv_vanilla.c_out(), c / 4),
            ("dilated C_out", conv_dilated.c_out(), c / 4),
            ("attention C_out", mhsa.c_out(), c / 2),
        ];
        for (name, got, want) in quarters {
            if got != want {
                return Err(HeadError::ChannelMismatch(format!("{name} = {got}, expected {want}")));
            }
        }
        for (name, got) in [
            ("dilated C_in", conv_dilated.c_in()),
            ("attention C_in", mhsa.c_in()),
            ("cls C_in", cls_proj.c_in()),
            ("reg C_in", reg_proj.c_in()),
        ] {
            if got != c {
                return Err(HeadError::ChannelMismatch(format!("{name} = {got}, expected {c}")));
            }
        }
        if !mhsa.c_out().is_multiple_of(mhsa.n_heads()) {
            return Err(HeadError::InvalidParams(
                "attention width must divide evenly across heads".into(),
            ));
        }
        Ok(HeadParams { conv_vanilla, conv_dilated, mhsa, cls_proj, reg_proj })
    }

    /// Deterministically seeded parameters: 3x3 kernels (dilation 2 on the
    /// dilated branch), 1x1 output projections, `anchors` classification
    /// channels and `6 * anchors` regression channels.
    pub fn seeded(c: usize, n_heads: usize, anchors: usize, seed: u64) -> Result<Self, HeadError> {
        if !c.is_multiple_of(4) {
            return Err(HeadError::InvalidParams(format!("channels {c} not divisible by 4")));
        }
        if anchors == 0 {
            return Err(HeadError::InvalidParams("need at least one anchor".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv_vanilla = ConvParams::seeded(c / 4, c, 3, 1, &mut rng);
        let conv_dilated = ConvParams::seeded(c / 4, c, 3, 2, &mut rng);
        let mhsa = MHSAParams::seeded(c, c / 2, n_heads, &mut rng)?;
        let cls_proj = ConvParams::seeded(anchors, c, 1, 1, &mut rng);
        let reg_proj = ConvParams::seeded(6 * anchors, c, 1, 1, &mut rng);
        HeadParams::new(conv_vanilla, conv_dilated, mhsa, cls_proj, reg_proj)
    }
}

/// Cross-correlation with stride 1 and symmetric zero padding, so the
/// spatial dims are preserved. The sampling grid is spread by the dilation.
pub fn conv2d(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap, HeadError> {
    let (n, c_in, h, w) = x.dim();
    if c_in != p.c_in() {
        return Err(HeadError::ChannelMismatch(format!(
            "input has {c_in} channels, kernel expects {}",
            p.c_in()
        )));
    }
    let k = p.kernel_size();
    let half = (k / 2) as isize;
    let d = p.dilation as isize;
    let xd = &x.data;
    let mut out = Array4::zeros((n, p.c_out(), h, w));
    for ni in 0..n {
        for co in 0..p.c_out() {
            for y in 0..h {
                for xcol in 0..w {
                    let mut acc = p.bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = y as isize + d * (ky as isize - half);
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xcol as isize + d * (kx as isize - half);
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[[ni, ci, iy as usize, ix as usize]]
                                    * p.kernel[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[ni, co, y, xcol]] = acc;
                }
            }
        }
    }
    Ok(FeatureMap { data: out })
}

/// Row-normalized scaled dot-product attention for one head.
/// Returns `(attention @ v, attention)`.
fn scaled_dot_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let d_k = q.dim().1 as f64;
    let mut scores = q.dot(&k.t()) / d_k.sqrt();
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|s| (s - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|s| s / sum);
    }
    (scores.dot(v), scores)
}

/// Tokens of one batch item: `(H*W, C)` in row-major spatial order.
fn tokens_of(x: &FeatureMap, batch: usize) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let mut t = Array2::zeros((h * w, c));
    for ci in 0..c {
        for y in 0..h {
            for xcol in 0..w {
                t[[y * w + xcol, ci]] = x.data[[batch, ci, y, xcol]];
            }
        }
    }
    t
}

fn mhsa_impl(
    x: &FeatureMap,
    p: &MHSAParams,
    want_attention: bool,
) -> Result<(FeatureMap, Option<Array4<f64>>), HeadError> {
    let (n, c_in, h, w) = x.dim();
    if c_in != p.c_in() {
        return Err(HeadError::ChannelMismatch(format!(
            "input has {c_in} channels, projections expect {}",
            p.c_in()
        )));
    }
    let t = h * w;
    let mut out = Array4::zeros((n, p.c_out(), h, w));
    let mut attention =
        want_attention.then(|| Array4::zeros((n, p.n_heads(), t, t)));
    for ni in 0..n {
        let tokens = tokens_of(x, ni);
        let mut combined = Array2::<f64>::zeros((t, p.c_out()));
        for head in 0..p.n_heads() {
            let q = tokens.dot(&p.proj_q[head]);
            let k = tokens.dot(&p.proj_k[head]);
            let v = tokens.dot(&p.proj_v[head]);
            let (head_out, attn) = scaled_dot_attention(&q, &k, &v);
            combined = combined + head_out.dot(&p.proj_out[head]);
            if let Some(a) = attention.as_mut() {
                a.slice_mut(s![ni, head, .., ..]).assign(&attn);
            }
        }
        for co in 0..p.c_out() {
            for y in 0..h {
                for xcol in 0..w {
                    out[[ni, co, y, xcol]] = combined[[y * w + xcol, co]] + p.bias[co];
                }
            }
        }
    }
    Ok((FeatureMap { data: out }, attention))
}

/// Multi-head self-attention over the `H*W` token sequence, reshaped back to
/// `(N, C_out, H, W)`.
pub fn mhsa(x: &FeatureMap, p: &MHSAParams) -> Result<FeatureMap, HeadError> {
    mhsa_impl(x, p, false).map(|(out, _)| out)
}

/// Attention weights as `(batch, head, token, token)`; every row sums to 1.
pub fn mhsa_attention(x: &FeatureMap, p: &MHSAParams) -> Result<Array4<f64>, HeadError> {
    mhsa_impl(x, p, true).map(|(_, attn)| attn.expect("attention requested"))
}

/// Full head: branch outputs concatenated in (vanilla, dilated, attention)
/// order into a fused `C`-channel map, then projected to classification and
/// regression maps.
pub fn conformer_forward(
    x: &FeatureMap,
    p: &HeadParams,
) -> Result<(FeatureMap, FeatureMap), HeadError> {
    let fused = conformer_fused(x, p)?;
    let cls = conv2d(&fused, &p.cls_proj)?;
    let reg = conv2d(&fused, &p.reg_proj)?;
    Ok((cls, reg))
}

/// The concatenated branch map, exposed so slices can be checked against the
/// individual branches.
pub fn conformer_fused(x: &FeatureMap, p: &HeadParams) -> Result<FeatureMap, HeadError> {
    let vanilla = conv2d(x, &p.conv_vanilla)?;
    let dilated = conv2d(x, &p.conv_dilated)?;
    let attended = mhsa(x, &p.mhsa)?;
    let fused = concatenate(
        Axis(1),
        &[vanilla.data.view(), dilated.data.view(), attended.data.view()],
    )
    .map_err(|e| HeadError::DimensionMismatch(e.to_string()))?;
    Ok(FeatureMap { data: fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn conv_zero_input_yields_bias() {
        let x = FeatureMap::zeros(1, 2, 4, 4);
        let kernel = Array4::from_shape_simple_fn((3, 2, 3, 3), || 0.5);
        let p = ConvParams::new(kernel, vec![1.0, -2.0, 0.25], 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for co in 0..3 {
            for v in y.data().slice(s![0, co, .., ..]) {
                assert_eq!(*v, p.bias[co]);
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = FeatureMap::random(1, 2, 5, 5, 3);
        let mut kernel = Array4::zeros((2, 2, 1, 1));
        kernel[[0, 0, 0, 0]] = 1.0;
        kernel[[1, 1, 0, 0]] = 1.0;
        let p = ConvParams::new(kernel, vec![0.0, 0.0], 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_impulse_response() {
        let mut data = Array4::zeros((1, 1, 9, 9));
        data[[0, 0, 4, 4]] = 1.0;
        let x = FeatureMap::new(data).unwrap();
        let p = ConvParams::new(Array4::ones((1, 1, 3, 3)), vec![0.0], 2).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for iy in 0..9i64 {
            for ix in 0..9i64 {
                let expected = [-2i64, 0, 2].contains(&(iy - 4)) && [-2i64, 0, 2].contains(&(ix - 4));
                assert_eq!(
                    y.data()[[0, 0, iy as usize, ix as usize]],
                    expected as i64 as f64,
                    "at ({iy}, {ix})"
                );
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = FeatureMap::zeros(1, 3, 4, 4);
        let p = ConvParams::new(Array4::zeros((1, 2, 3, 3)), vec![0.0], 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(HeadError::ChannelMismatch(_))));
    }

    #[test]
    fn attention_rows_normalize() {
        let x = FeatureMap::random(2, 8, 4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MHSAParams::seeded(8, 4, 2, &mut rng).unwrap();
        let attn = mhsa_attention(&x, &p).unwrap();
        for ni in 0..2 {
            for head in 0..2 {
                for row in attn.slice(s![ni, head, .., ..]).rows() {
                    assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_identity_weight() {
        let x = FeatureMap::random(1, 4, 1, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MHSAParams::seeded(4, 2, 2, &mut rng).unwrap();
        let attn = mhsa_attention(&x, &p).unwrap();
        assert_eq!(attn.dim(), (1, 2, 1, 1));
        assert_relative_eq!(attn[[0, 0, 0, 0]], 1.0);
        // output equals the out-projection of the value projection plus bias
        let out = mhsa(&x, &p).unwrap();
        let tokens = tokens_of(&x, 0);
        let mut expect = Array2::<f64>::zeros((1, 2));
        for head in 0..2 {
            expect = expect + tokens.dot(&p.proj_v[head]).dot(&p.proj_out[head]);
        }
        for co in 0..2 {
            assert_relative_eq!(out.data()[[0, co, 0, 0]], expect[[0, co]] + p.bias[co], epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (h, w) = (3, 4);
        let x = FeatureMap::random(1, 8, h, w, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = MHSAParams::seeded(8, 4, 2, &mut rng).unwrap();
        // destination token i reads from source token perm[i]
        let perm: Vec<usize> = vec![5, 0, 7, 2, 9, 4, 11, 6, 1, 8, 3, 10];
        let mut permuted = Array4::zeros((1, 8, h, w));
        for ci in 0..8 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[[0, ci, dst / w, dst % w]] = x.data()[[0, ci, src / w, src % w]];
            }
        }
        let out_of_permuted = mhsa(&FeatureMap::new(permuted).unwrap(), &p).unwrap();
        let out = mhsa(&x, &p).unwrap();
        for ci in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                let a = out_of_permuted.data()[[0, ci, dst / w, dst % w]];
                let b = out.data()[[0, ci, src / w, src % w]];
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn attention_invariant_to_uniform_key_shift() {
        let q = Array2::from_shape_simple_fn((5, 3), || 0.3);
        let q = {
            let mut q = q;
            q[[0, 1]] = -1.0;
            q[[3, 0]] = 0.9;
            q
        };
        let k = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 * 0.7 - j as f64 * 0.2).sin());
        let v = Array2::from_shape_fn((5, 3), |(i, j)| (i + 2 * j) as f64);
        let (base, _) = scaled_dot_attention(&q, &k, &v);
        let shifted_k = &k + 3.5;
        let (shifted, _) = scaled_dot_attention(&q, &shifted_k, &v);
        for (a, b) in base.iter().zip(shifted.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn conformer_shapes_and_slices() {
        let c = 16;
        let x = FeatureMap::random(1, c, 6, 5, 4);
        let p = HeadParams::seeded(c, 4, 2, 0).unwrap();
        let fused = conformer_fused(&x, &p).unwrap();
        assert_eq!(fused.dim(), (1, c, 6, 5));
        let (cls, reg) = conformer_forward(&x, &p).unwrap();
        assert_eq!(cls.dim(), (1, 2, 6, 5));
        assert_eq!(reg.dim(), (1, 12, 6, 5));

        // slices recover branch outputs bit-exactly
        let vanilla = conv2d(&x, &p.conv_vanilla).unwrap();
        let dilated = conv2d(&x, &p.conv_dilated).unwrap();
        let attended = mhsa(&x, &p.mhsa).unwrap();
        assert_eq!(fused.data().slice(s![.., 0..c / 4, .., ..]), vanilla.data());
        assert_eq!(fused.data().slice(s![.., c / 4..c / 2, .., ..]), dilated.data());
        assert_eq!(fused.data().slice(s![.., c / 2..c, .., ..]), attended.data());
    }

    #[test]
    fn conformer_zero_input_zero_bias_is_zero() {
        let c = 8;
        let x = FeatureMap::zeros(1, c, 4, 4);
        let mut p = HeadParams::seeded(c, 4, 1, 0).unwrap();
        let zero_bias = |cp: &ConvParams| {
            ConvParams::new(cp.kernel.clone(), vec![0.0; cp.c_out()], cp.dilation).unwrap()
        };
        p.conv_vanilla = zero_bias(&p.conv_vanilla);
        p.conv_dilated = zero_bias(&p.conv_dilated);
        p.cls_proj = zero_bias(&p.cls_proj);
        p.reg_proj = zero_bias(&p.reg_proj);
        p.mhsa = MHSAParams::new(
            p.mhsa.proj_q.clone(),
            p.mhsa.proj_k.clone(),
            p.mhsa.proj_v.clone(),
            p.mhsa.proj_out.clone(),
            vec![0.0; p.mhsa.c_out()],
        )
        .unwrap();
        let p = HeadParams::new(p.conv_vanilla, p.conv_dilated, p.mhsa, p.cls_proj, p.reg_proj)
            .unwrap();
        let (cls, reg) = conformer_forward(&x, &p).unwrap();
        assert!(cls.data().iter().all(|&v| v == 0.0));
        assert!(reg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn receptive_field_separation() {
        let c = 8;
        let (h, w) = (9, 9);
        let x = FeatureMap::random(1, c, h, w, 6);
        let p = HeadParams::seeded(c, 4, 1, 1).unwrap();
        let fused = conformer_fused(&x, &p).unwrap();

        let mut bumped = x.data().clone();
        bumped[[0, 0, 0, 0]] += 1.0; // far corner
        let fused_bumped = conformer_fused(&FeatureMap::new(bumped).unwrap(), &p).unwrap();

        let probe = (h - 1, w - 1); // distance >> kernel extent
        for ch in 0..c / 2 {
            assert_eq!(
                fused.data()[[0, ch, probe.0, probe.1]],
                fused_bumped.data()[[0, ch, probe.0, probe.1]],
                "conv branch channel {ch} leaked beyond its receptive field"
            );
        }
        let attn_changed = (c / 2..c).any(|ch| {
            fused.data()[[0, ch, probe.0, probe.1]] != fused_bumped.data()[[0, ch, probe.0, probe.1]]
        });
        assert!(attn_changed, "attention should see the whole map");
    }

    #[test]
    fn forward_is_deterministic() {
        let x = FeatureMap::random(1, 8, 5, 5, 12);
        let p = HeadParams::seeded(8, 2, 1, 3).unwrap();
        let (cls1, reg1) = conformer_forward(&x, &p).unwrap();
        let (cls2, reg2) = conformer_forward(&x, &p).unwrap();
        assert_eq!(cls1, cls2);
        assert_eq!(reg1, reg2);
    }

    #[test]
    fn channel_budget_enforced() {
        assert!(HeadParams::seeded(6, 1, 1, 0).is_err()); // not divisible by 4
        for c in [8, 64, 256] {
            let p = HeadParams::seeded(c, 4, 1, 0).unwrap();
            assert_eq!(
                p.conv_vanilla.c_out() + p.conv_dilated.c_out() + p.mhsa.c_out(),
                c
            );
        }
    }

    #[test]
    fn params_roundtrip_through_json() {
        let p = HeadParams::seeded(8, 2, 1, 5).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: HeadParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn feature_map_rejects_bad_values() {
        let mut data = Array4::zeros((1, 1, 2, 2));
        data[[0, 0, 0, 0]] = f64::NAN;
        assert_eq!(FeatureMap::new(data), Err(HeadError::NonFinite));
    }
}
