use crate::tensor::{Float, Graph, Tensor, Var};

use super::{LossWeights, ModelError, Result};

/// Which image set a discriminator guards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    WithObject,
    WithoutObject,
}

/// Encoder output on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeVars {
    pub background: Var,
    pub object: Var,
}

pub trait Codec<T: Float> {
    fn encode(&mut self, g: &mut Graph<T>, x: Var) -> Result<CodeVars>;
    fn decode(&mut self, g: &mut Graph<T>, background: Var, object: Var) -> Result<Var>;
}

pub trait Critic<T: Float> {
    /// Pre-sigmoid scores, one per sample.
    fn logits(&mut self, g: &mut Graph<T>, domain: Domain, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct FourChildren {
    pub x_au_rec: Var,
    pub x_b0_rec: Var,
    pub x_a0: Var,
    pub x_bu: Var,
    pub code_au: CodeVars,
    pub code_b0: CodeVars,
}

/// The two swapped children only.
#[derive(Debug, Clone, Copy)]
pub struct Crossbreeds {
    pub x_a0: Var,
    pub x_bu: Var,
    pub code_au: CodeVars,
    pub code_b0: CodeVars,
}

/// Double-swap outputs: crossbreeds re-encoded and swapped back.
#[derive(Debug, Clone, Copy)]
pub struct StackedChildren {
    pub x_a0: Var,
    pub x_bu: Var,
    pub x_au_grand: Var,
    pub x_b0_grand: Var,
    pub code_au: CodeVars,
    pub code_b0: CodeVars,
    /// Code of the object-free crossbreed; its object part should vanish.
    pub code_a0: CodeVars,
    pub code_bu: CodeVars,
}

fn zeros_like<T: Float>(g: &mut Graph<T>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    g.constant(Tensor::zeros(&shape))
}

fn check_pair<T: Float>(g: &Graph<T>, x_au: Var, x_b0: Var) -> Result<()> {
    if g.shape(x_au) != g.shape(x_b0) {
        return Err(ModelError::InputShape {
            expected: format!("both batches shaped {:?}", g.shape(x_au)),
            got: g.shape(x_b0).to_vec(),
        });
    }
    Ok(())
}

pub fn crossbreed_forward<T: Float, C: Codec<T> + ?Sized>(
    codec: &mut C,
    g: &mut Graph<T>,
    x_au: Var,
    x_b0: Var,
) -> Result<Crossbreeds> {
    check_pair(g, x_au, x_b0)?;
    let code_au = codec.encode(g, x_au)?;
    let code_b0 = codec.encode(g, x_b0)?;
    let zero = zeros_like(g, code_au.object);
    let x_a0 = codec.decode(g, code_au.background, zero)?;
    let x_bu = codec.decode(g, code_b0.background, code_au.object)?;
    Ok(Crossbreeds {
        x_a0,
        x_bu,
        code_au,
        code_b0,
    })
}

/// Encodes both parents once and decodes the four children. Both object-free
/// children get a literal zero code; the encoded epsilon is never decoded.
pub fn four_child_forward<T: Float, C: Codec<T> + ?Sized>(
    codec: &mut C,
    g: &mut Graph<T>,
    x_au: Var,
    x_b0: Var,
) -> Result<FourChildren> {
    let c = crossbreed_forward(codec, g, x_au, x_b0)?;
    let x_au_rec = codec.decode(g, c.code_au.background, c.code_au.object)?;
    let zero = zeros_like(g, c.code_b0.object);
    let x_b0_rec = codec.decode(g, c.code_b0.background, zero)?;
    Ok(FourChildren {
        x_au_rec,
        x_b0_rec,
        x_a0: c.x_a0,
        x_bu: c.x_bu,
        code_au: c.code_au,
        code_b0: c.code_b0,
    })
}

pub fn stacked_forward<T: Float, C: Codec<T> + ?Sized>(
    codec: &mut C,
    g: &mut Graph<T>,
    x_au: Var,
    x_b0: Var,
) -> Result<StackedChildren> {
    let c = crossbreed_forward(codec, g, x_au, x_b0)?;
    let code_a0 = codec.encode(g, c.x_a0)?;
    let code_bu = codec.encode(g, c.x_bu)?;
    let x_au_grand = codec.decode(g, code_a0.background, code_bu.object)?;
    let zero = zeros_like(g, code_bu.object);
    let x_b0_grand = codec.decode(g, code_bu.background, zero)?;
    Ok(StackedChildren {
        x_a0: c.x_a0,
        x_bu: c.x_bu,
        x_au_grand,
        x_b0_grand,
        code_au: c.code_au,
        code_b0: c.code_b0,
        code_a0,
        code_bu,
    })
}

/// Generator loss terms as plain numbers, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorTerms {
    pub rec_au: f64,
    pub rec_b0: f64,
    /// Adversarial term on the object-free crossbreed.
    pub gan_0: f64,
    /// Adversarial term on the object-carrying crossbreed.
    pub gan_ne0: f64,
    pub null: f64,
    pub par: f64,
    /// Weighted sum.
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub rec_au: Var,
    pub rec_b0: Var,
    pub gan_0: Var,
    pub gan_ne0: Var,
    pub null: Var,
    pub par: Var,
}

impl GeneratorLoss {
    pub fn terms<T: Float>(&self, g: &Graph<T>) -> GeneratorTerms {
        let v = |x: Var| g.value(x).item().as_f64();
        GeneratorTerms {
            rec_au: v(self.rec_au),
            rec_b0: v(self.rec_b0),
            gan_0: v(self.gan_0),
            gan_ne0: v(self.gan_ne0),
            null: v(self.null),
            par: v(self.par),
            total: v(self.total),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_generator_loss<T: Float, D: Critic<T> + ?Sized>(
    critic: &mut D,
    g: &mut Graph<T>,
    x_au: Var,
    x_b0: Var,
    rec_au_out: Var,
    rec_b0_out: Var,
    x_a0: Var,
    x_bu: Var,
    null: Var,
    w: &LossWeights,
) -> Result<GeneratorLoss> {
    let d = g.sub(x_au, rec_au_out)?;
    let rec_au = g.l1(d);
    let d = g.sub(x_b0, rec_b0_out)?;
    let rec_b0 = g.l1(d);

    let logits = critic.logits(g, Domain::WithoutObject, x_a0)?;
    let l = g.neg_log_sigmoid(logits);
    let gan_0 = g.mean(l);
    let logits = critic.logits(g, Domain::WithObject, x_bu)?;
    let l = g.neg_log_sigmoid(logits);
    let gan_ne0 = g.mean(l);

    let parents = g.add(x_au, x_b0)?;
    let children = g.add(x_a0, x_bu)?;
    let d = g.sub(parents, children)?;
    let par = g.l1(d);

    let rec = g.add(rec_au, rec_b0)?;
    let rec = g.scale(rec, w.rec);
    let gan = g.add(gan_0, gan_ne0)?;
    let gan = g.scale(gan, w.gan);
    let null_w = g.scale(null, w.null);
    let par_w = g.scale(par, w.par);
    let total = g.add(rec, gan)?;
    let total = g.add(total, null_w)?;
    let total = g.add(total, par_w)?;
    Ok(GeneratorLoss {
        total,
        rec_au,
        rec_b0,
        gan_0,
        gan_ne0,
        null,
        par,
    })
}

/// Reconstruction, non-saturating adversarial, nulling and parallelogram terms.
pub fn generator_loss<T: Float, D: Critic<T> + ?Sized>(
    critic: &mut D,
    g: &mut Graph<T>,
    children: &FourChildren,
    x_au: Var,
    x_b0: Var,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    let null = g.l1(children.code_b0.object);
    assemble_generator_loss(
        critic,
        g,
        x_au,
        x_b0,
        children.x_au_rec,
        children.x_b0_rec,
        children.x_a0,
        children.x_bu,
        null,
        weights,
    )
}

/// As [`generator_loss`], with grandchildren as reconstructions and the
/// nulling term also applied to the re-encoded object-free crossbreed.
pub fn stacked_generator_loss<T: Float, D: Critic<T> + ?Sized>(
    critic: &mut D,
    g: &mut Graph<T>,
    children: &StackedChildren,
    x_au: Var,
    x_b0: Var,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    let n1 = g.l1(children.code_b0.object);
    let n2 = g.l1(children.code_a0.object);
    let null = g.add(n1, n2)?;
    assemble_generator_loss(
        critic,
        g,
        x_au,
        x_b0,
        children.x_au_grand,
        children.x_b0_grand,
        children.x_a0,
        children.x_bu,
        null,
        weights,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss {
    pub total: Var,
    /// Real with-object parents against object-carrying crossbreeds.
    pub with: Var,
    /// Real object-free parents against object-free crossbreeds.
    pub without: Var,
}

impl DiscriminatorLoss {
    /// `(with, without)` values.
    pub fn values<T: Float>(&self, g: &Graph<T>) -> (f64, f64) {
        (
            g.value(self.with).item().as_f64(),
            g.value(self.without).item().as_f64(),
        )
    }
}

/// Binary cross-entropy for both discriminators. The fakes are detached, so
/// no gradient reaches the generator through this loss.
pub fn discriminator_loss<T: Float, D: Critic<T> + ?Sized>(
    critic: &mut D,
    g: &mut Graph<T>,
    x_au: Var,
    x_b0: Var,
    fake_a0: Var,
    fake_bu: Var,
) -> Result<DiscriminatorLoss> {
    let fake_a0 = g.detach(fake_a0);
    let fake_bu = g.detach(fake_bu);
    let mut bce = |g: &mut Graph<T>, domain: Domain, real: Var, fake: Var| -> Result<Var> {
        let lr = critic.logits(g, domain, real)?;
        let lr = g.neg_log_sigmoid(lr);
        let lr = g.mean(lr);
        let lf = critic.logits(g, domain, fake)?;
        let lf = g.neg_log_one_minus_sigmoid(lf);
        let lf = g.mean(lf);
        Ok(g.add(lr, lf)?)
    };
    let with = bce(g, Domain::WithObject, x_au, fake_bu)?;
    let without = bce(g, Domain::WithoutObject, x_b0, fake_a0)?;
    let total = g.add(with, without)?;
    Ok(DiscriminatorLoss {
        total,
        with,
        without,
    })
}
