//! Fixed three-stage macro-architecture hosting six searchable blocks.
//!
//! Stage 1 opens with a Basicblock (stride-1 conv), stages 2 and 3 with a
//! Downsample block (spatial stride 2); each stage then runs two A2SConv
//! blocks. A global-average-pool head maps the final features to class
//! logits. The spectral extent is only ever touched by the searched pooling,
//! which restores it, so the skeleton preserves the band count end to end.

use serde::{Deserialize, Serialize};

use crate::a2sconv::{derive_block, A2SConvBlock, InnerOp, OuterOp, Phase};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamKind, ParamStore, Scalar, Tape, Tensor};

pub const NUM_STAGES: usize = 3;
pub const BLOCKS_PER_STAGE: usize = 2;
pub const NUM_BLOCKS: usize = NUM_STAGES * BLOCKS_PER_STAGE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub stem_channels: usize,
    pub patch_size: usize,
    pub bands: usize,
    pub num_classes: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            stem_channels: 16,
            patch_size: 19,
            bands: 200,
            num_classes: 16,
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::invalid(
                "supernet_config",
                format!("patch_size must be odd and positive, got {}", self.patch_size),
            ));
        }
        if self.stem_channels == 0 || self.bands == 0 || self.num_classes == 0 {
            return Err(Error::invalid(
                "supernet_config",
                "stem_channels, bands and num_classes must be positive",
            ));
        }
        Ok(())
    }

    /// Channel width of stage `s` (0-based): stem_channels * 2^s.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            stem_channels: self.stem_channels,
            patch_size: self.patch_size,
            bands: self.bands,
            num_classes: self.num_classes,
        }
    }
}

/// Macro-configuration identity carried by genotypes and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub stem_channels: usize,
    pub patch_size: usize,
    pub bands: usize,
    pub num_classes: usize,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(stem_channels={}, patch_size={}, bands={}, num_classes={})",
            self.stem_channels, self.patch_size, self.bands, self.num_classes
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockChoice {
    pub outer: OuterOp,
    pub inner: InnerOp,
}

/// Discrete architecture: one (outer, inner) choice per block, in block
/// order, plus the macro-config fingerprint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub blocks: Vec<BlockChoice>,
    pub fingerprint: Fingerprint,
}

impl Genotype {
    /// Fraction of blocks whose outer choice is an asymmetric pooling.
    pub fn asymmetric_occupancy(&self) -> f64 {
        let pooled = self
            .blocks
            .iter()
            .filter(|b| b.outer != OuterOp::NoPool)
            .count();
        pooled as f64 / self.blocks.len() as f64
    }
}

/// Serialize a genotype as its text document.
pub fn genotype_to_string(genotype: &Genotype) -> String {
    let mut s = serde_json::to_string_pretty(genotype).expect("genotype serializes");
    s.push('\n');
    s
}

/// Parse a genotype document, validating the block count.
pub fn parse_genotype(text: &str) -> Result<Genotype> {
    let genotype: Genotype = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("genotype document line {} column {}", e.line(), e.column()),
        details: e.to_string(),
    })?;
    if genotype.blocks.len() != NUM_BLOCKS {
        return Err(Error::Parse {
            context: "genotype document".to_string(),
            details: format!("expected {NUM_BLOCKS} blocks, found {}", genotype.blocks.len()),
        });
    }
    Ok(genotype)
}

fn conv_bn_names(prefix: &str) -> (String, String, String, String, String) {
    (
        format!("{prefix}.conv.w"),
        format!("{prefix}.bn.gamma"),
        format!("{prefix}.bn.beta"),
        format!("{prefix}.bn.running_mean"),
        format!("{prefix}.bn.running_var"),
    )
}

fn register_conv_bn<E: Scalar>(
    params: &mut ParamStore<E>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    seed: u64,
) -> Result<()> {
    let (w, gamma, beta, rm, rv) = conv_bn_names(prefix);
    let mut rng = Rng::stream(seed, &w);
    params.insert(
        w,
        Tensor::he_normal(&[c_out, c_in, 3, 3, 3], c_in * 27, &mut rng),
        true,
        ParamKind::Weight,
    )?;
    params.insert(gamma, Tensor::full(&[c_out], E::ONE), true, ParamKind::Weight)?;
    params.insert(beta, Tensor::zeros(&[c_out]), true, ParamKind::Weight)?;
    params.insert(rm, Tensor::zeros(&[c_out]), false, ParamKind::Weight)?;
    params.insert(rv, Tensor::full(&[c_out], E::ONE), false, ParamKind::Weight)?;
    Ok(())
}

/// conv(k=3, pad 1) -> BN -> ReLU with the given spatial stride.
fn conv_bn_relu<E: Scalar>(
    tape: &Tape<E>,
    params: &mut ParamStore<E>,
    phase: Phase,
    prefix: &str,
    stride: [usize; 3],
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (w_name, g_name, b_name, rm_name, rv_name) = conv_bn_names(prefix);
    let w = params.tracked(tape, &w_name)?;
    let y = tape.conv3d(x, &w, None, stride, [1, 1, 1], [1, 1, 1])?;
    let gamma = params.tracked(tape, &g_name)?;
    let beta = params.tracked(tape, &b_name)?;
    let rm = params.value(&rm_name)?.clone();
    let rv = params.value(&rv_name)?.clone();
    let mode = match phase {
        Phase::Train => crate::tensor::NormMode::BatchStats,
        Phase::Eval => crate::tensor::NormMode::RunningStats,
    };
    let (y, updated) = tape.batch_norm3d(&y, &gamma, &beta, Some((&rm, &rv)), mode)?;
    if let Some((nm, nv)) = updated {
        params.set_value(&rm_name, nm)?;
        params.set_value(&rv_name, nv)?;
    }
    Ok(tape.relu(&y))
}

fn register_macro_skeleton<E: Scalar>(
    params: &mut ParamStore<E>,
    cfg: &SupernetConfig,
    seed: u64,
) -> Result<()> {
    register_conv_bn(params, "stem", 1, cfg.stage_channels(0), seed)?;
    for stage in 1..NUM_STAGES {
        register_conv_bn(
            params,
            &format!("stage{stage}.down"),
            cfg.stage_channels(stage - 1),
            cfg.stage_channels(stage),
            seed,
        )?;
    }
    let c_last = cfg.stage_channels(NUM_STAGES - 1);
    let mut rng = Rng::stream(seed, "head.w");
    params.insert(
        "head.w",
        Tensor::he_normal(&[cfg.num_classes, c_last], c_last, &mut rng),
        true,
        ParamKind::Weight,
    )?;
    params.insert(
        "head.b",
        Tensor::zeros(&[cfg.num_classes]),
        true,
        ParamKind::Weight,
    )?;
    Ok(())
}

fn make_blocks(cfg: &SupernetConfig) -> Vec<A2SConvBlock> {
    (0..NUM_BLOCKS)
        .map(|i| A2SConvBlock::new(i, cfg.stage_channels(i / BLOCKS_PER_STAGE)))
        .collect()
}

fn check_input<E: Scalar>(cfg: &SupernetConfig, x: &Tensor<E>, who: &'static str) -> Result<()> {
    let dims = x.dims5()?;
    if dims[1] != 1 || dims[2] != cfg.bands || dims[3] != cfg.patch_size || dims[4] != cfg.patch_size
    {
        return Err(Error::shape(
            who,
            format!(
                "stem expects (N, 1, {}, {}, {}), got {:?}",
                cfg.bands, cfg.patch_size, cfg.patch_size, x.shape()
            ),
        ));
    }
    Ok(())
}

/// The over-parameterized search network.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub cfg: SupernetConfig,
    pub blocks: Vec<A2SConvBlock>,
}

/// Build the supernet and its parameter store. Two builds from the same seed
/// produce bit-identical parameters.
pub fn build_supernet<E: Scalar>(cfg: &SupernetConfig, seed: u64) -> Result<(Supernet, ParamStore<E>)> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    register_macro_skeleton(&mut params, cfg, seed)?;
    let blocks = make_blocks(cfg);
    for block in &blocks {
        block.register(&mut params, seed)?;
    }
    Ok((Supernet { cfg: *cfg, blocks }, params))
}

impl Supernet {
    /// Softmax-mixed forward over every searchable branch.
    pub fn forward<E: Scalar>(
        &self,
        tape: &Tape<E>,
        params: &mut ParamStore<E>,
        phase: Phase,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        check_input(&self.cfg, x, "supernet_forward")?;
        let mut y = conv_bn_relu(tape, params, phase, "stem", [1, 1, 1], x)?;
        for stage in 0..NUM_STAGES {
            if stage > 0 {
                y = conv_bn_relu(
                    tape,
                    params,
                    phase,
                    &format!("stage{stage}.down"),
                    [1, 2, 2],
                    &y,
                )?;
            }
            for b in 0..BLOCKS_PER_STAGE {
                let block = &self.blocks[stage * BLOCKS_PER_STAGE + b];
                y = block.mixed_forward(tape, params, phase, &y)?;
            }
        }
        let w = params.tracked(tape, "head.w")?;
        let b = params.tracked(tape, "head.b")?;
        tape.classifier_head(&y, &w, &b)
    }

    /// Argmax derivation over every block's logits.
    pub fn derive_genotype<E: Scalar>(&self, params: &ParamStore<E>) -> Result<Genotype> {
        let choices = self
            .blocks
            .iter()
            .map(|block| {
                derive_block(params, block).map(|(outer, inner)| BlockChoice { outer, inner })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Genotype {
            blocks: choices,
            fingerprint: self.cfg.fingerprint(),
        })
    }
}

/// The derived single-branch network, retrained from scratch.
#[derive(Clone, Debug)]
pub struct CompactNet {
    pub cfg: SupernetConfig,
    pub genotype: Genotype,
    pub blocks: Vec<A2SConvBlock>,
}

/// Build a compact network for a genotype with fresh, seeded weights. Each
/// block keeps only the chosen branch; its parameters reuse the supernet
/// names of that branch, so a weight transplant is a plain name-wise copy.
pub fn build_compact<E: Scalar>(
    genotype: &Genotype,
    cfg: &SupernetConfig,
    seed: u64,
) -> Result<(CompactNet, ParamStore<E>)> {
    cfg.validate()?;
    if genotype.fingerprint != cfg.fingerprint() {
        return Err(Error::FingerprintMismatch {
            stored: genotype.fingerprint.to_string(),
            expected: cfg.fingerprint().to_string(),
        });
    }
    if genotype.blocks.len() != NUM_BLOCKS {
        return Err(Error::invalid(
            "build_compact",
            format!("genotype has {} blocks, expected {NUM_BLOCKS}", genotype.blocks.len()),
        ));
    }
    let mut params = ParamStore::new();
    register_macro_skeleton(&mut params, cfg, seed)?;
    let blocks = make_blocks(cfg);
    for (block, choice) in blocks.iter().zip(&genotype.blocks) {
        let c = block.channels;
        let inner = choice.inner;
        let k = inner.kernel();
        let name = block.conv_weight_name(inner);
        let mut rng = Rng::stream(seed, &name);
        params.insert(
            name,
            Tensor::he_normal(&[c, c, k, k, k], c * k * k * k, &mut rng),
            true,
            ParamKind::Weight,
        )?;
        params.insert(
            block.bn_name(inner, "gamma"),
            Tensor::full(&[c], E::ONE),
            true,
            ParamKind::Weight,
        )?;
        params.insert(
            block.bn_name(inner, "beta"),
            Tensor::zeros(&[c]),
            true,
            ParamKind::Weight,
        )?;
        params.insert(
            block.bn_name(inner, "running_mean"),
            Tensor::zeros(&[c]),
            false,
            ParamKind::Weight,
        )?;
        params.insert(
            block.bn_name(inner, "running_var"),
            Tensor::full(&[c], E::ONE),
            false,
            ParamKind::Weight,
        )?;
    }
    Ok((
        CompactNet {
            cfg: *cfg,
            genotype: genotype.clone(),
            blocks,
        },
        params,
    ))
}

impl CompactNet {
    pub fn forward<E: Scalar>(
        &self,
        tape: &Tape<E>,
        params: &mut ParamStore<E>,
        phase: Phase,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        check_input(&self.cfg, x, "compact_forward")?;
        let mut y = conv_bn_relu(tape, params, phase, "stem", [1, 1, 1], x)?;
        for stage in 0..NUM_STAGES {
            if stage > 0 {
                y = conv_bn_relu(
                    tape,
                    params,
                    phase,
                    &format!("stage{stage}.down"),
                    [1, 2, 2],
                    &y,
                )?;
            }
            for b in 0..BLOCKS_PER_STAGE {
                let idx = stage * BLOCKS_PER_STAGE + b;
                let block = &self.blocks[idx];
                let choice = self.genotype.blocks[idx];
                y = block.discrete_forward(tape, params, phase, &y, (choice.outer, choice.inner))?;
            }
        }
        let w = params.tracked(tape, "head.w")?;
        let b = params.tracked(tape, "head.b")?;
        tape.classifier_head(&y, &w, &b)
    }
}
