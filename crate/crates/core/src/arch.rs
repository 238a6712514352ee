//! Static analysis of convolutional pipelines: per-layer and composed
//! receptive fields, output resolutions, cumulative stride (jump), and
//! tiny-target collapse warnings, all computed symbolically from an
//! [`ArchConfig`] without allocating feature maps.

use crate::erd::effective_rf;
use crate::error::{CoreError, Result};

/// One primitive layer, carrying exactly the fields its kind uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { k: usize, s: usize, p: usize, r: usize },
    Pool { k: usize, s: usize, p: usize },
    Upsample { f: usize },
    /// Elementwise fusion with a tapped feature map; shapes must match.
    Add { tap: String },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Add { .. } => "add",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidArgument(msg));
        match *self {
            LayerSpec::Conv { k, s, r, .. } => {
                if k < 1 || s < 1 || r < 1 {
                    return bad(format!("conv needs k,s,r >= 1, got k={k} s={s} r={r}"));
                }
            }
            LayerSpec::Pool { k, s, .. } => {
                if k < 1 || s < 1 {
                    return bad(format!("pool needs k,s >= 1, got k={k} s={s}"));
                }
            }
            LayerSpec::Upsample { f } => {
                if f < 1 {
                    return bad(format!("upsample needs f >= 1, got {f}"));
                }
            }
            LayerSpec::Add { .. } => {}
        }
        Ok(())
    }
}

/// A layer plus the metadata the reports carry along.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedLayer {
    pub spec: LayerSpec,
    pub label: String,
    /// Output channel count; `None` carries the previous count through.
    pub out_channels: Option<usize>,
    /// For multi-branch blocks analyzed by their max-RF branch: the
    /// per-branch receptive fields.
    pub branch_rfs: Vec<usize>,
}

impl TracedLayer {
    pub fn new(spec: LayerSpec) -> Self {
        TracedLayer {
            spec,
            label: String::new(),
            out_channels: None,
            branch_rfs: Vec::new(),
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn channels(mut self, c: usize) -> Self {
        self.out_channels = Some(c);
        self
    }

    pub fn with_branch_rfs(mut self, rfs: Vec<usize>) -> Self {
        self.branch_rfs = rfs;
        self
    }
}

/// Named point in the trunk whose shape the reports expose. `after = None`
/// taps the network input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tap {
    pub name: String,
    pub after: Option<usize>,
}

/// A side chain that starts from a tap (prediction heads, the TODB branch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub name: String,
    pub from: String,
    pub layers: Vec<TracedLayer>,
}

/// Symbolic description of a convolutional pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub layers: Vec<TracedLayer>,
    pub taps: Vec<Tap>,
    pub branches: Vec<BranchSpec>,
    /// Declared target extent in input pixels, for collapse warnings.
    pub target_size: Option<f64>,
}

impl ArchConfig {
    pub fn new(input_size: usize, in_channels: usize) -> Self {
        ArchConfig {
            input_size,
            in_channels,
            layers: Vec::new(),
            taps: Vec::new(),
            branches: Vec::new(),
            target_size: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(CoreError::InvalidArgument("input_size must be >= 1".into()));
        }
        for layer in self.layers.iter().chain(self.branches.iter().flat_map(|b| &b.layers)) {
            layer.spec.validate()?;
        }
        for tap in &self.taps {
            if let Some(i) = tap.after {
                if i >= self.layers.len() {
                    return Err(CoreError::InvalidArgument(format!(
                        "tap {} references layer {i}, but there are only {}",
                        tap.name,
                        self.layers.len()
                    )));
                }
            }
        }
        for branch in &self.branches {
            if !self.taps.iter().any(|t| t.name == branch.from) {
                return Err(CoreError::InvalidArgument(format!(
                    "branch {} starts from unknown tap {}",
                    branch.name, branch.from
                )));
            }
        }
        Ok(())
    }
}

/// Output resolution of one layer: floor((h + 2p - RF)/s) + 1 for conv and
/// pool (RF per the dilated-kernel formula), h*f for upsample. Errors when
/// the result would be < 1.
pub fn layer_resolution(h: usize, spec: &LayerSpec) -> Result<usize> {
    spec.validate()?;
    let formula = |op, k, s, p, r| -> Result<usize> {
        let rf = effective_rf(r, k) as i64;
        let num = h as i64 + 2 * p as i64 - rf;
        let out = num.div_euclid(s as i64) + 1;
        if num < 0 || out < 1 {
            return Err(CoreError::EmptyOutput {
                op,
                input: h,
                footprint: rf as usize,
                stride: s,
                padding: p,
                size: out,
            });
        }
        Ok(out as usize)
    };
    match *spec {
        LayerSpec::Conv { k, s, p, r } => formula("conv", k, s, p, r),
        LayerSpec::Pool { k, s, p } => formula("pool", k, s, p, 1),
        LayerSpec::Upsample { f } => Ok(h * f),
        LayerSpec::Add { .. } => Ok(h),
    }
}

/// True when the resolution formula divides exactly (no border loss).
fn divides_exactly(h: usize, spec: &LayerSpec) -> bool {
    match *spec {
        LayerSpec::Conv { k, s, p, r } => {
            (h as i64 + 2 * p as i64 - effective_rf(r, k) as i64).rem_euclid(s as i64) == 0
        }
        LayerSpec::Pool { k, s, p } => (h as i64 + 2 * p as i64 - k as i64).rem_euclid(s as i64) == 0,
        _ => true,
    }
}

/// One row of the receptive-field report.
#[derive(Debug, Clone)]
pub struct RfRow {
    pub idx: usize,
    pub kind: String,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub r: usize,
    pub resolution: usize,
    pub rf_layer: usize,
    pub rf_composed: usize,
    pub jump: f64,
    pub note: String,
}

#[derive(Debug, Clone, Default)]
pub struct RfReport {
    pub rows: Vec<RfRow>,
    pub warnings: Vec<String>,
}

impl RfReport {
    /// Composed receptive field after the last layer (1 for an empty config).
    pub fn final_rf(&self) -> usize {
        self.rows.last().map(|r| r.rf_composed).unwrap_or(1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("idx,kind,k,s,p,r,H,rf_layer,rf_composed,jump\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                row.idx,
                row.kind,
                row.k,
                row.s,
                row.p,
                row.r,
                row.resolution,
                row.rf_layer,
                row.rf_composed,
                row.jump
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<4} {:<10} {:>3} {:>3} {:>3} {:>3} {:>6} {:>8} {:>11} {:>6}  note\n",
            "idx", "kind", "k", "s", "p", "r", "H", "rf_layer", "rf_composed", "jump"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<4} {:<10} {:>3} {:>3} {:>3} {:>3} {:>6} {:>8} {:>11} {:>6}  {}\n",
                row.idx,
                row.kind,
                row.k,
                row.s,
                row.p,
                row.r,
                row.resolution,
                row.rf_layer,
                row.rf_composed,
                row.jump,
                row.note
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Compose per-layer receptive fields over the trunk:
/// RF_n = RF_(n-1) + (rf_layer - 1) * J_(n-1), with the jump J multiplying by
/// each stride and dividing by each upsample factor.
pub fn compose_rf(config: &ArchConfig) -> Result<RfReport> {
    config.validate()?;
    let mut report = RfReport::default();
    let mut h = config.input_size;
    let mut rf = 1.0f64;
    let mut jump = 1.0f64;
    let mut collapse_reported = false;
    for (idx, layer) in config.layers.iter().enumerate() {
        let (rf_layer, k, s, p, r, jump_next) = match layer.spec {
            LayerSpec::Conv { k, s, p, r } => (effective_rf(r, k), k, s, p, r, jump * s as f64),
            LayerSpec::Pool { k, s, p } => (k, k, s, p, 1, jump * s as f64),
            LayerSpec::Upsample { f } => (1, 0, 1, 0, 0, jump / f as f64),
            LayerSpec::Add { .. } => (1, 0, 1, 0, 0, jump),
        };
        if !divides_exactly(h, &layer.spec) {
            report.warnings.push(format!(
                "layer {idx} ({}): resolution formula divides inexactly at h={h}; border information is lost",
                layer.spec.kind_name()
            ));
        }
        h = layer_resolution(h, &layer.spec)?;
        rf += (rf_layer as f64 - 1.0) * jump;
        jump = jump_next;
        if let Some(t) = config.target_size {
            if !collapse_reported && t / jump < 1.0 {
                report.warnings.push(format!(
                    "target of {t}px collapses below one cell at layer {idx} (jump {jump}): {:.3} cells",
                    t / jump
                ));
                collapse_reported = true;
            }
        }
        let note = if layer.branch_rfs.is_empty() {
            layer.label.clone()
        } else {
            let rfs: Vec<String> = layer.branch_rfs.iter().map(|r| r.to_string()).collect();
            let prefix = if layer.label.is_empty() { String::new() } else { format!("{} ", layer.label) };
            format!("{prefix}(max-RF branch of [{}])", rfs.join(", "))
        };
        report.rows.push(RfRow {
            idx,
            kind: layer.spec.kind_name().to_string(),
            k,
            s,
            p,
            r,
            resolution: h,
            rf_layer,
            rf_composed: rf.round() as usize,
            jump,
            note,
        });
    }
    Ok(report)
}

/// One traced point: spatial size and channel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub path: String,
    pub kind: String,
    pub size: usize,
    pub channels: usize,
}

impl ShapeRow {
    pub fn dims(&self) -> String {
        format!("{}x{}x{}", self.size, self.size, self.channels)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
    /// Tap name -> (size, channels).
    pub taps: Vec<(String, usize, usize)>,
}

impl ShapeTable {
    pub fn tap(&self, name: &str) -> Option<(usize, usize)> {
        self.taps
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, s, c)| (s, c))
    }

    pub fn row(&self, path: &str) -> Option<&ShapeRow> {
        self.rows.iter().find(|r| r.path == path)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:<10} shape\n", "layer", "kind"));
        for row in &self.rows {
            out.push_str(&format!("{:<24} {:<10} {}\n", row.path, row.kind, row.dims()));
        }
        if !self.taps.is_empty() {
            out.push_str("taps:\n");
            for (name, s, c) in &self.taps {
                out.push_str(&format!("  {name}: {s}x{s}x{c}\n"));
            }
        }
        out
    }
}

/// Symbolic per-layer shape trace of trunk and branches, without allocating
/// any tensor. Fusion (`Add`) layers verify that both operands match and
/// report the mismatch otherwise.
pub fn trace_shapes(config: &ArchConfig) -> Result<ShapeTable> {
    config.validate()?;
    let mut table = ShapeTable::default();
    let mut h = config.input_size;
    let mut c = config.in_channels;
    table.rows.push(ShapeRow {
        path: "input".into(),
        kind: "input".into(),
        size: h,
        channels: c,
    });

    let mut after_layer = Vec::with_capacity(config.layers.len());
    for (idx, layer) in config.layers.iter().enumerate() {
        h = layer_resolution(h, &layer.spec)?;
        c = layer.out_channels.unwrap_or(c);
        let path = if layer.label.is_empty() {
            format!("trunk[{idx}]")
        } else {
            format!("trunk[{idx}] {}", layer.label)
        };
        table.rows.push(ShapeRow {
            path,
            kind: layer.spec.kind_name().to_string(),
            size: h,
            channels: c,
        });
        after_layer.push((h, c));
    }

    for tap in &config.taps {
        let (th, tc) = match tap.after {
            None => (config.input_size, config.in_channels),
            Some(i) => after_layer[i],
        };
        table.taps.push((tap.name.clone(), th, tc));
    }

    for branch in &config.branches {
        let (mut bh, mut bc) = table
            .tap(&branch.from)
            .expect("validated: branch tap exists");
        for (idx, layer) in branch.layers.iter().enumerate() {
            if let LayerSpec::Add { tap } = &layer.spec {
                let (oh, oc) = table.tap(tap).ok_or_else(|| {
                    CoreError::InvalidArgument(format!(
                        "branch {} fuses with unknown tap {tap}",
                        branch.name
                    ))
                })?;
                if (oh, oc) != (bh, bc) {
                    return Err(CoreError::ShapeMismatch {
                        op: "branch fusion add",
                        lhs: vec![bc, bh, bh],
                        rhs: vec![oc, oh, oh],
                    });
                }
            }
            bh = layer_resolution(bh, &layer.spec)?;
            bc = layer.out_channels.unwrap_or(bc);
            let path = if layer.label.is_empty() {
                format!("{}[{idx}]", branch.name)
            } else {
                format!("{}[{idx}] {}", branch.name, layer.label)
            };
            table.rows.push(ShapeRow {
                path,
                kind: layer.spec.kind_name().to_string(),
                size: bh,
                channels: bc,
            });
        }
    }
    Ok(table)
}
