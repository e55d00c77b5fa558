//! Polarized scaling coefficients and layer-type classification.
//!
//! Every level uses the same rule: a block's norm divided by the mean norm of
//! its group, raised to a power (2 by default). Ratios above one amplify a
//! block, ratios below one suppress it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

pub const DEFAULT_EXPONENT: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum ScalingError {
    #[error("reverse variant is undefined for a zero coefficient")]
    ReverseOfZero,
    #[error("invalid pattern `{pattern}`: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("rules line {line}: {reason}")]
    BadRulesLine { line: usize, reason: String },
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
}

pub type Result<T> = std::result::Result<T, ScalingError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerType {
    AttnQkv,
    AttnOut,
    MlpUp,
    MlpDown,
    Other,
}

impl LayerType {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::AttnQkv => "AttnQKV",
            LayerType::AttnOut => "AttnOut",
            LayerType::MlpUp => "MlpUp",
            LayerType::MlpDown => "MlpDown",
            LayerType::Other => "Other",
        }
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerType {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
        Ok(match norm.as_str() {
            "attnqkv" => LayerType::AttnQkv,
            "attnout" => LayerType::AttnOut,
            "mlpup" => LayerType::MlpUp,
            "mlpdown" => LayerType::MlpDown,
            "other" => LayerType::Other,
            _ => {
                return Err(ScalingError::Unknown {
                    what: "layer type",
                    value: s.to_string(),
                })
            }
        })
    }
}

/// Ordered name → type rules plus the patterns selecting which 2-D tensors are merged as matrices.
#[derive(Clone, Debug)]
pub struct LayerRules {
    rules: Vec<(Regex, LayerType)>,
    include: Vec<Regex>,
}

const DEFAULT_RULES: &[(&str, LayerType)] = &[
    (r"(attn|attention).*(in_proj|qkv|c_attn|q_proj|k_proj|v_proj|query|key|value)", LayerType::AttnQkv),
    (r"(attn|attention).*(out_proj|o_proj|c_proj|dense|proj)", LayerType::AttnOut),
    (r"(mlp|ffn|feed_forward).*(c_fc|fc1|up_proj|gate_proj|fc_in|w1|w3|dense_h_to_4h)", LayerType::MlpUp),
    (r"(mlp|ffn|feed_forward).*(c_proj|fc2|down_proj|fc_out|w2|dense_4h_to_h)", LayerType::MlpDown),
];

const DEFAULT_INCLUDE: &[&str] = &[r"(attn|attention|mlp|ffn|feed_forward).*weight$"];

fn compile(pattern: &str) -> Result<Regex> {
    Regex::new(pattern).map_err(|source| ScalingError::BadPattern {
        pattern: pattern.to_string(),
        source,
    })
}

impl Default for LayerRules {
    fn default() -> Self {
        Self::new(DEFAULT_RULES.iter().map(|&(p, t)| (p, t)), DEFAULT_INCLUDE.iter().copied())
            .expect("built-in patterns compile")
    }
}

impl LayerRules {
    pub fn new<'a>(
        rules: impl IntoIterator<Item = (&'a str, LayerType)>,
        include: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        Ok(Self {
            rules: rules
                .into_iter()
                .map(|(p, t)| compile(p).map(|r| (r, t)))
                .collect::<Result<_>>()?,
            include: include.into_iter().map(compile).collect::<Result<_>>()?,
        })
    }

    /// Parse the plain-text rules format.
    ///
    /// ```text
    /// # comment
    /// attn\.qkv	AttnQKV
    /// mlp\.fc1	MlpUp
    /// [include]
    /// \.weight$
    /// ```
    ///
    /// Lines before `[include]` are `pattern<TAB>type`; lines after it are bare
    /// include patterns. A file without an `[include]` section keeps the
    /// default include patterns.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        let mut include: Option<Vec<Regex>> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            if line.trim() == "[include]" {
                include.get_or_insert_with(Vec::new);
                continue;
            }
            if line.trim() == "[rules]" {
                continue;
            }
            match include.as_mut() {
                Some(inc) => inc.push(compile(line.trim())?),
                None => {
                    let (pattern, ty) = line.split_once('\t').ok_or(ScalingError::BadRulesLine {
                        line: idx + 1,
                        reason: "expected `pattern<TAB>type`".into(),
                    })?;
                    let ty = ty.trim().parse().map_err(|_| ScalingError::BadRulesLine {
                        line: idx + 1,
                        reason: format!("unknown layer type `{}`", ty.trim()),
                    })?;
                    rules.push((compile(pattern)?, ty));
                }
            }
        }
        let include = match include {
            Some(inc) => inc,
            None => DEFAULT_INCLUDE.iter().map(|p| compile(p)).collect::<Result<_>>()?,
        };
        Ok(Self { rules, include })
    }

    pub fn classify(&self, name: &str) -> LayerType {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(name))
            .map_or(LayerType::Other, |&(_, t)| t)
    }

    pub fn is_matrix_layer(&self, name: &str) -> bool {
        self.include.iter().any(|re| re.is_match(name))
    }
}

pub fn classify_layers<'a>(names: impl IntoIterator<Item = &'a str>, rules: &LayerRules) -> BTreeMap<String, LayerType> {
    names
        .into_iter()
        .map(|n| (n.to_string(), rules.classify(n)))
        .collect()
}

/// How a raw coefficient γ is post-processed; the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    #[default]
    Full,
    Reverse,
    NoiseMinus,
    SignalPlus,
    None,
}

impl FromStr for Variant {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "reverse" => Variant::Reverse,
            "noise-" | "noise--" | "noise_minus" => Variant::NoiseMinus,
            "signal+" | "signal++" | "signal_plus" => Variant::SignalPlus,
            "none" => Variant::None,
            _ => {
                return Err(ScalingError::Unknown {
                    what: "variant",
                    value: s.to_string(),
                })
            }
        })
    }
}

pub fn apply_variant(gamma: f64, variant: Variant) -> Result<f64> {
    Ok(match variant {
        Variant::Full => gamma,
        Variant::Reverse => {
            if gamma == 0.0 {
                return Err(ScalingError::ReverseOfZero);
            }
            1.0 / gamma
        }
        Variant::NoiseMinus => gamma.min(1.0),
        Variant::SignalPlus => gamma.max(1.0),
        Variant::None => 1.0,
    })
}

/// `(x_i / mean(x))^exponent`. A zero mean or exactly equal norms yield
/// all ones, regardless of how the mean rounds.
pub fn relative_power(norms: &[f64], exponent: f64) -> Vec<f64> {
    if norms.is_empty() {
        return Vec::new();
    }
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    if mean == 0.0 || norms.windows(2).all(|w| w[0] == w[1]) {
        return vec![1.0; norms.len()];
    }
    norms
        .iter()
        .map(|&n| {
            let ratio = n / mean;
            if ratio == 1.0 || exponent == 0.0 {
                1.0
            } else {
                ratio.powf(exponent)
            }
        })
        .collect()
}

/// Inter-task coefficients `s_t` from the Frobenius norms of the truncated coordinates.
pub fn inter_task_coeffs(coords: &[DMatrix<f64>], exponent: f64) -> Vec<f64> {
    let norms: Vec<f64> = coords.iter().map(|a| a.norm()).collect();
    relative_power(&norms, exponent)
}

/// Inter-dimension coefficients `c_j` from the column norms of the concatenated coordinates.
pub fn inter_dim_coeffs(a_cat: &DMatrix<f64>, exponent: f64) -> Vec<f64> {
    let norms: Vec<f64> = a_cat.column_iter().map(|c| c.norm()).collect();
    relative_power(&norms, exponent)
}

/// Inter-layer coefficients `β_ℓ`, computed within groups of same-type layers.
/// `Other` layers and singleton groups get 1.
pub fn inter_layer_coeffs(
    merged: &BTreeMap<String, DMatrix<f64>>,
    rules: &LayerRules,
    exponent: f64,
) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<LayerType, Vec<(&str, f64)>> = BTreeMap::new();
    for (name, m) in merged {
        groups.entry(rules.classify(name)).or_default().push((name, m.norm()));
    }
    let mut out = BTreeMap::new();
    for (ty, members) in groups {
        if ty == LayerType::Other || members.len() == 1 {
            out.extend(members.iter().map(|(n, _)| (n.to_string(), 1.0)));
            continue;
        }
        let norms: Vec<f64> = members.iter().map(|&(_, n)| n).collect();
        let coeffs = relative_power(&norms, exponent);
        out.extend(members.iter().zip(coeffs).map(|((n, _), c)| (n.to_string(), c)));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    Descending,
    Ascending,
    Random(u64),
}

impl FromStr for NormOrder {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descending" | "desc" => Ok(NormOrder::Descending),
            "ascending" | "asc" => Ok(NormOrder::Ascending),
            "random" => Ok(NormOrder::Random(0)),
            _ => Err(ScalingError::Unknown {
                what: "order",
                value: s.to_string(),
            }),
        }
    }
}

/// Keys ordered by Frobenius norm; ties fall back to lexicographic key order.
pub fn norm_order<M: FrobeniusNorm>(matrices: &BTreeMap<String, M>, direction: NormOrder) -> Vec<String> {
    let mut keyed: Vec<(String, f64)> = matrices.iter().map(|(k, m)| (k.clone(), m.frobenius())).collect();
    match direction {
        NormOrder::Descending => keyed.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))),
        NormOrder::Ascending => keyed.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0))),
        NormOrder::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            keyed.shuffle(&mut rng);
        }
    }
    keyed.into_iter().map(|(k, _)| k).collect()
}

/// Anything with a Frobenius norm that `norm_order` can rank.
pub trait FrobeniusNorm {
    fn frobenius(&self) -> f64;
}

impl FrobeniusNorm for DMatrix<f64> {
    fn frobenius(&self) -> f64 {
        self.norm()
    }
}

impl FrobeniusNorm for crate::tensorstore::DenseTensor {
    fn frobenius(&self) -> f64 {
        self.frobenius_norm()
    }
}

impl FrobeniusNorm for f64 {
    fn frobenius(&self) -> f64 {
        self.abs()
    }
}

/// Coefficients recorded during a merge, for reporting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleReport {
    pub per_task: BTreeMap<(String, usize), f64>,
    pub per_dim: BTreeMap<String, Vec<f64>>,
    pub per_layer: BTreeMap<String, f64>,
}
