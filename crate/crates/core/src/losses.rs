//! Adversarial, reconstruction, cycle-consistency, and identity objectives.

use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Translator;
use crate::perceptual::PerceptualNet;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Weighting of every loss term. `lambda_p_*` scale the perceptual part of
/// the reconstruction distance inside the cycle and identity losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_p_cyc: f64,
    pub lambda_p_idt: f64,
    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_1: 1.0,
            lambda_p_cyc: 10.0,
            lambda_p_idt: 1.0,
            lambda_adv: 0.5,
            lambda_cyc: 1.0,
            lambda_idt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_1", self.lambda_1),
            ("lambda_p_cyc", self.lambda_p_cyc),
            ("lambda_p_idt", self.lambda_p_idt),
            ("lambda_adv", self.lambda_adv),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_idt", self.lambda_idt),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One reconstruction distance with its unweighted sub-terms kept for logging.
pub struct RecLoss {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Option<Var>,
}

/// A loss evaluated in both translation directions.
pub struct RecPair {
    pub total: Var,
    pub x_side: RecLoss,
    pub y_side: RecLoss,
}

/// Unweighted reconstruction sub-terms as plain numbers.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RecParts {
    pub l1: f64,
    pub perceptual: f64,
}

/// Scalar snapshot of one training step's objectives.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cyc: f64,
    pub idt: f64,
    pub cyc_x: RecParts,
    pub cyc_y: RecParts,
    pub idt_x: RecParts,
    pub idt_y: RecParts,
    pub total: f64,
}

impl LossBundle {
    /// Checks total == λ_adv·adv_g + λ_cyc·cyc + λ_idt·idt up to `tol`.
    pub fn consistent(&self, w: &LossWeights, tol: f64) -> bool {
        let expect = w.lambda_adv * self.adv_g + w.lambda_cyc * self.cyc + w.lambda_idt * self.idt;
        (self.total - expect).abs() <= tol
    }
}

impl RecLoss {
    pub fn parts<T: Scalar>(&self, g: &Graph<T>) -> RecParts {
        RecParts {
            l1: g.scalar(self.l1).to_f64().unwrap_or(f64::NAN),
            perceptual: self
                .perceptual
                .map(|p| g.scalar(p).to_f64().unwrap_or(f64::NAN))
                .unwrap_or(0.0),
        }
    }
}

/// λ1·mean|a−b| + λp·LPIPS(a, b). The perceptual branch is skipped entirely
/// when λp = 0 so cheap L1-only configurations stay cheap.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    lpips: &PerceptualNet<T>,
    a: Var,
    b: Var,
    lambda_1: f64,
    lambda_p: f64,
) -> Result<RecLoss> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::dim(format!(
            "reconstruction loss needs matching shapes, got {sa:?} vs {sb:?}"
        )));
    }
    let diff = g.sub(a, b);
    let absdiff = g.abs(diff);
    let l1 = g.mean_all(absdiff);
    let mut total = g.mul_scalar(l1, T::from_f64(lambda_1));
    let mut perceptual = None;
    if lambda_p != 0.0 {
        let p = lpips.distance(g, a, b)?;
        let weighted = g.mul_scalar(p, T::from_f64(lambda_p));
        total = g.add(total, weighted);
        perceptual = Some(p);
    }
    Ok(RecLoss {
        total,
        l1,
        perceptual,
    })
}

/// Generator side of the non-saturating GAN objective: make fakes score real.
pub fn generator_bce<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    g.bce_with_logits_mean(fake_logits, T::one())
}

/// Discriminator side: real scores high, fake scores low, averaged so a
/// maximally confused critic sits at ln 2.
pub fn discriminator_bce<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let real = g.bce_with_logits_mean(real_logits, T::one());
    let fake = g.bce_with_logits_mean(fake_logits, T::zero());
    let sum = g.add(real, fake);
    g.mul_scalar(sum, T::from_f64(0.5))
}

/// Both directions of Eq.-(5)-style adversarial training, averaged. The
/// discriminator term scores detached fakes so it never reaches the
/// generators; the generator term keeps the full path.
pub fn adversarial_losses<T: Scalar>(
    g: &mut Graph<T>,
    d_x: &Discriminator<T>,
    d_y: &Discriminator<T>,
    x: Var,
    y: Var,
    fake_x: Var,
    fake_y: Var,
) -> Result<(Var, Var)> {
    let mut gen_terms = Vec::with_capacity(2);
    let mut disc_terms = Vec::with_capacity(2);
    for (d, real, fake) in [(d_x, x, fake_x), (d_y, y, fake_y)] {
        let real_logits = d.score(g, real)?;
        let fake_logits = d.score(g, fake)?;
        gen_terms.push(generator_bce(g, fake_logits));
        let fake_detached = g.detach(fake);
        let fake_logits_d = d.score(g, fake_detached)?;
        disc_terms.push(discriminator_bce(g, real_logits, fake_logits_d));
    }
    let half = T::from_f64(0.5);
    let gsum = g.add(gen_terms[0], gen_terms[1]);
    let dsum = g.add(disc_terms[0], disc_terms[1]);
    Ok((g.mul_scalar(gsum, half), g.mul_scalar(dsum, half)))
}

/// Cycle consistency given already-translated fakes, so the trainer reuses
/// the generator passes feeding the adversarial loss.
pub fn cycle_from_fakes<T: Scalar>(
    g: &mut Graph<T>,
    gen_x: &impl Translator<T>,
    gen_y: &impl Translator<T>,
    lpips: &PerceptualNet<T>,
    x: Var,
    y: Var,
    fake_x: Var,
    fake_y: Var,
    w: &LossWeights,
) -> Result<RecPair> {
    let back_x = gen_x.translate_batch(g, fake_y)?;
    let back_y = gen_y.translate_batch(g, fake_x)?;
    let x_side = reconstruction_loss(g, lpips, back_x, x, w.lambda_1, w.lambda_p_cyc)?;
    let y_side = reconstruction_loss(g, lpips, back_y, y, w.lambda_1, w.lambda_p_cyc)?;
    let total = g.add(x_side.total, y_side.total);
    Ok(RecPair {
        total,
        x_side,
        y_side,
    })
}

/// L_rec(G_X(G_Y(x)), x) + L_rec(G_Y(G_X(y)), y).
pub fn cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    gen_x: &impl Translator<T>,
    gen_y: &impl Translator<T>,
    lpips: &PerceptualNet<T>,
    x: Var,
    y: Var,
    w: &LossWeights,
) -> Result<RecPair> {
    let fake_y = gen_y.translate_batch(g, x)?;
    let fake_x = gen_x.translate_batch(g, y)?;
    cycle_from_fakes(g, gen_x, gen_y, lpips, x, y, fake_x, fake_y, w)
}

/// L_rec(G_X(x), x) + L_rec(G_Y(y), y): each generator must leave images of
/// its own output domain alone.
pub fn identity_loss<T: Scalar>(
    g: &mut Graph<T>,
    gen_x: &impl Translator<T>,
    gen_y: &impl Translator<T>,
    lpips: &PerceptualNet<T>,
    x: Var,
    y: Var,
    w: &LossWeights,
) -> Result<RecPair> {
    let idt_x = gen_x.translate_batch(g, x)?;
    let idt_y = gen_y.translate_batch(g, y)?;
    let x_side = reconstruction_loss(g, lpips, idt_x, x, w.lambda_1, w.lambda_p_idt)?;
    let y_side = reconstruction_loss(g, lpips, idt_y, y, w.lambda_1, w.lambda_p_idt)?;
    let total = g.add(x_side.total, y_side.total);
    Ok(RecPair {
        total,
        x_side,
        y_side,
    })
}

/// λ_adv·L_adv + λ_cyc·L_cyc + λ_idt·L_idt.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    adv_g: Var,
    cyc: Var,
    idt: Var,
    w: &LossWeights,
) -> Var {
    let a = g.mul_scalar(adv_g, T::from_f64(w.lambda_adv));
    let c = g.mul_scalar(cyc, T::from_f64(w.lambda_cyc));
    let i = g.mul_scalar(idt, T::from_f64(w.lambda_idt));
    let ac = g.add(a, c);
    g.add(ac, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::DiscriminatorKind;
    use crate::generator::IdentityStub;
    use crate::tensor::Initializer;
    use crate::testutil::gradcheck;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;

    fn lpips() -> PerceptualNet<f64> {
        PerceptualNet::tiny(&[1.0, 1.0], 17)
    }

    fn weights_l1_only() -> LossWeights {
        LossWeights {
            lambda_p_cyc: 0.0,
            lambda_p_idt: 0.0,
            ..LossWeights::default()
        }
    }

    /// Affine test translator a·x + b.
    struct AffineStub(f64, f64);

    impl Translator<f64> for AffineStub {
        fn translate_batch(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
            let scaled = g.mul_scalar(x, self.0);
            Ok(g.add_scalar(scaled, self.1))
        }
    }

    #[test]
    fn reconstruction_of_identical_inputs_is_zero() {
        let net = lpips();
        let mut g = Graph::new();
        let a = g.input(Initializer::new(1).uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let rec = reconstruction_loss(&mut g, &net, a, a, 1.0, 10.0).unwrap();
        assert_eq!(g.scalar(rec.total), 0.0);
    }

    #[test]
    fn unit_gap_l1_is_one() {
        let net = lpips();
        let mut g = Graph::new();
        let a = g.input(ArrayD::<f64>::zeros(IxDyn(&[2, 3, 4, 4])));
        let b = g.input(ArrayD::<f64>::ones(IxDyn(&[2, 3, 4, 4])));
        let rec = reconstruction_loss(&mut g, &net, a, b, 1.0, 0.0).unwrap();
        assert_eq!(g.scalar(rec.total), 1.0);
        assert!(rec.perceptual.is_none());
    }

    #[test]
    fn reconstruction_combines_standalone_terms() {
        let net = lpips();
        let mut init = Initializer::new(3);
        let av = init.uniform::<f64>(&[1, 3, 8, 8], -1.0, 1.0);
        let bv = init.uniform::<f64>(&[1, 3, 8, 8], -1.0, 1.0);
        let mut g = Graph::new();
        let (a, b) = (g.input(av), g.input(bv));
        let rec = reconstruction_loss(&mut g, &net, a, b, 1.0, 10.0).unwrap();

        let diff = g.sub(a, b);
        let absdiff = g.abs(diff);
        let l1 = g.mean_all(absdiff);
        let p = net.distance(&mut g, a, b).unwrap();
        let expect = g.scalar(l1) + 10.0 * g.scalar(p);
        assert!((g.scalar(rec.total) - expect).abs() < 1e-12);
        assert!((rec.parts(&g).l1 - g.scalar(l1)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = lpips();
        let mut g = Graph::new();
        let a = g.input(ArrayD::<f64>::zeros(IxDyn(&[1, 3, 8, 8])));
        let b = g.input(ArrayD::<f64>::zeros(IxDyn(&[1, 3, 4, 4])));
        assert!(matches!(
            reconstruction_loss(&mut g, &net, a, b, 1.0, 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn uniform_zero_logits_give_ln2_both_sides() {
        // A zeroed-out patch discriminator emits logit 0 for every input.
        let d_x = Discriminator::<f64>::new("dx", DiscriminatorKind::ConvPatch, 3).unwrap();
        let d_y = Discriminator::<f64>::new("dy", DiscriminatorKind::ConvPatch, 4).unwrap();
        for d in [&d_x, &d_y] {
            for p in d.all_params() {
                let shape = p.shape();
                p.set_value(ArrayD::zeros(IxDyn(&shape)));
            }
        }
        let mut init = Initializer::new(5);
        let mut g = Graph::new();
        let x = g.input(init.uniform(&[2, 3, 16, 16], -1.0, 1.0));
        let y = g.input(init.uniform(&[2, 3, 16, 16], -1.0, 1.0));
        let fx = g.input(init.uniform(&[2, 3, 16, 16], -1.0, 1.0));
        let fy = g.input(init.uniform(&[2, 3, 16, 16], -1.0, 1.0));
        let (gen, disc) = adversarial_losses(&mut g, &d_x, &d_y, x, y, fx, fy).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.scalar(gen) - ln2).abs() < 1e-12);
        assert!((g.scalar(disc) - ln2).abs() < 1e-12);
    }

    #[test]
    fn saturated_discriminator_terms_hit_their_limits() {
        let mut g = Graph::new();
        let real = g.input(ArrayD::from_elem(IxDyn(&[4, 1, 3, 3]), 30.0));
        let fake = g.input(ArrayD::from_elem(IxDyn(&[4, 1, 3, 3]), -30.0));
        let disc = discriminator_bce(&mut g, real, fake);
        assert!(g.scalar(disc) < 1e-10);
        let gen = generator_bce(&mut g, fake);
        assert!((g.scalar(gen) - 30.0f64).abs() < 1e-10);
    }

    #[test]
    fn bce_terms_match_scalar_recomputation() {
        let mut init = Initializer::new(7);
        let rv = init.uniform::<f64>(&[3, 1, 2, 2], -2.0, 2.0);
        let fv = init.uniform::<f64>(&[3, 1, 2, 2], -2.0, 2.0);
        let mut g = Graph::new();
        let (real, fake) = (g.input(rv.clone()), g.input(fv.clone()));
        let disc = discriminator_bce(&mut g, real, fake);
        let gen = generator_bce(&mut g, fake);

        let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
        let mean = |it: &ArrayD<f64>, t: f64| {
            it.iter().map(|&l| softplus(l) - t * l).sum::<f64>() / it.len() as f64
        };
        let disc_oracle = 0.5 * (mean(&rv, 1.0) + mean(&fv, 0.0));
        let gen_oracle = mean(&fv, 1.0);
        assert!((g.scalar(disc) - disc_oracle).abs() < 1e-12);
        assert!((g.scalar(gen) - gen_oracle).abs() < 1e-12);
    }

    #[test]
    fn discriminator_term_reaches_head_but_not_generator_inputs() {
        let d_x = Discriminator::<f64>::new("dx", DiscriminatorKind::TinyRandom, 3).unwrap();
        let d_y = Discriminator::<f64>::new("dy", DiscriminatorKind::TinyRandom, 4).unwrap();
        let mut init = Initializer::new(9);
        let mut g = Graph::new();
        let x = g.input(init.uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let y = g.input(init.uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let fx = g.input(init.uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let fy = g.input(init.uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let (_, disc) = adversarial_losses(&mut g, &d_x, &d_y, x, y, fx, fy).unwrap();
        let grads = g.backward(disc);
        assert!(grads.get(fx).is_none(), "detached fake leaked gradient");
        assert!(grads.get(fy).is_none());
        assert!(d_x
            .trainable_parameters()
            .iter()
            .all(|p| p.grad().is_some()));
    }

    #[test]
    fn cycle_is_zero_for_identity_stubs() {
        let net = lpips();
        let mut init = Initializer::new(11);
        let mut g = Graph::new();
        let x = g.input(init.uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let y = g.input(init.uniform(&[1, 3, 8, 8], -1.0, 1.0));
        let pair = cycle_loss(
            &mut g,
            &IdentityStub,
            &IdentityStub,
            &net,
            x,
            y,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(g.scalar(pair.total), 0.0);
    }

    #[test]
    fn cycle_adds_per_direction_terms() {
        // G_Y doubles, G_X shifts by one: the x cycle lands exactly on a
        // constant −1 input while the y cycle misses zero by 2.
        let net = lpips();
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), -1.0));
        let y = g.input(ArrayD::<f64>::zeros(IxDyn(&[1, 3, 4, 4])));
        let pair = cycle_loss(
            &mut g,
            &AffineStub(1.0, 1.0),
            &AffineStub(2.0, 0.0),
            &net,
            x,
            y,
            &weights_l1_only(),
        )
        .unwrap();
        assert_eq!(g.scalar(pair.x_side.total), 0.0);
        assert_eq!(g.scalar(pair.y_side.total), 2.0);
        assert_eq!(g.scalar(pair.total), 2.0);
    }

    #[test]
    fn identity_is_zero_for_stubs_and_uses_idt_weight() {
        let net = lpips();
        let mut init = Initializer::new(13);
        let xv = init.uniform::<f64>(&[1, 3, 8, 8], -1.0, 1.0);
        let yv = init.uniform::<f64>(&[1, 3, 8, 8], -1.0, 1.0);
        let mut g = Graph::new();
        let (x, y) = (g.input(xv), g.input(yv));
        let pair = identity_loss(
            &mut g,
            &IdentityStub,
            &IdentityStub,
            &net,
            x,
            y,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(g.scalar(pair.total), 0.0);

        // A shifted generator exposes the λp choice: the identity loss must
        // weight the perceptual term by λp_idt, not λp_cyc.
        let w = LossWeights {
            lambda_p_cyc: 10.0,
            lambda_p_idt: 1.0,
            ..LossWeights::default()
        };
        let shifted = AffineStub(1.0, 0.5);
        let pair = identity_loss(&mut g, &shifted, &shifted, &net, x, y, &w).unwrap();
        let expect = |side: &RecLoss, g: &Graph<f64>| {
            g.scalar(side.l1) + 1.0 * g.scalar(side.perceptual.unwrap())
        };
        let total = expect(&pair.x_side, &g) + expect(&pair.y_side, &g);
        assert!((g.scalar(pair.total) - total).abs() < 1e-12);
    }

    #[test]
    fn pair_losses_match_manual_decomposition_on_real_generators() {
        use crate::backbone::{Backbone, BackboneArch};
        use crate::generator::{AdapterConfig, GeneratorSpec, LoraAdapterSet, MffConfig};
        use std::rc::Rc;

        let backbone =
            Rc::new(Backbone::<f64>::tiny_random(BackboneArch::default(), 61).unwrap());
        let cfg = AdapterConfig::default();
        let mut init = Initializer::new(cfg.seed);
        let unet = LoraAdapterSet::inject(
            "g",
            &backbone.unet.adapter_slots(),
            &cfg.targets,
            cfg.rank,
            cfg.scaling,
            &mut init,
        )
        .unwrap();
        let gen_x = GeneratorSpec::new(
            "gx",
            backbone.clone(),
            unet.clone(),
            "frozen section",
            &cfg,
            MffConfig::default(),
            &mut init,
        )
        .unwrap();
        let gen_y = GeneratorSpec::new(
            "gy",
            backbone.clone(),
            unet,
            "paraffin section",
            &cfg,
            MffConfig::default(),
            &mut init,
        )
        .unwrap();

        let net = lpips();
        let w = LossWeights::default();
        let mut ir = Initializer::new(15);
        let xv = ir.uniform::<f64>(&[1, 3, 16, 16], -1.0, 1.0);
        let yv = ir.uniform::<f64>(&[1, 3, 16, 16], -1.0, 1.0);

        let mut g = Graph::new();
        let (x, y) = (g.input(xv.clone()), g.input(yv.clone()));
        let pair = cycle_loss(&mut g, &gen_x, &gen_y, &net, x, y, &w).unwrap();
        let combined = g.scalar(pair.total);

        let mut g2 = Graph::new();
        let (x2, y2) = (g2.input(xv), g2.input(yv));
        let fy = gen_y.translate_batch(&mut g2, x2).unwrap();
        let bx = gen_x.translate_batch(&mut g2, fy).unwrap();
        let fx = gen_x.translate_batch(&mut g2, y2).unwrap();
        let by = gen_y.translate_batch(&mut g2, fx).unwrap();
        let rx = reconstruction_loss(&mut g2, &net, bx, x2, w.lambda_1, w.lambda_p_cyc).unwrap();
        let ry = reconstruction_loss(&mut g2, &net, by, y2, w.lambda_1, w.lambda_p_cyc).unwrap();
        let manual = g2.scalar(rx.total) + g2.scalar(ry.total);
        assert_eq!(combined, manual);
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let adv = g.input(ndarray::arr0(1.0).into_dyn());
        let cyc = g.input(ndarray::arr0(2.0).into_dyn());
        let idt = g.input(ndarray::arr0(3.0).into_dyn());
        let total = total_loss(&mut g, adv, cyc, idt, &w);
        assert_eq!(g.scalar(total), 5.5);

        let zero = g.input(ndarray::arr0(0.0).into_dyn());
        let z = total_loss(&mut g, zero, zero, zero, &w);
        assert_eq!(g.scalar(z), 0.0);

        // linearity probe in the adversarial slot
        let adv2 = g.input(ndarray::arr0(1.25).into_dyn());
        let total2 = total_loss(&mut g, adv2, cyc, idt, &w);
        assert!((g.scalar(total2) - g.scalar(total) - w.lambda_adv * 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_validate_defaults_and_reject_negatives() {
        let w = LossWeights::default();
        assert!(w.validate().is_ok());
        assert_eq!(
            (w.lambda_1, w.lambda_p_cyc, w.lambda_p_idt),
            (1.0, 10.0, 1.0)
        );
        assert_eq!((w.lambda_adv, w.lambda_cyc, w.lambda_idt), (0.5, 1.0, 1.0));

        let bad = LossWeights {
            lambda_cyc: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn reconstruction_gradient_passes_finite_difference_check() {
        let net = lpips();
        let mut init = Initializer::new(19);
        // Keep |a - b| away from the L1 kink at zero.
        let a = init.uniform::<f64>(&[1, 3, 4, 4], 0.3, 0.9);
        let b = init.uniform::<f64>(&[1, 3, 4, 4], -0.9, -0.3);
        gradcheck(
            |g, vars| {
                let rec = reconstruction_loss(g, &net, vars[0], vars[1], 1.0, 1.0).unwrap();
                rec.total
            },
            &[a, b],
            1e-5,
            1e-3,
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn reconstruction_is_nonnegative_and_symmetric(seed in 0u64..1000) {
            let net = lpips();
            let mut init = Initializer::new(seed);
            let av = init.uniform::<f64>(&[1, 3, 8, 8], -1.0, 1.0);
            let bv = init.uniform::<f64>(&[1, 3, 8, 8], -1.0, 1.0);
            let mut g = Graph::new();
            let (a, b) = (g.input(av), g.input(bv));
            let ab = reconstruction_loss(&mut g, &net, a, b, 1.0, 10.0).unwrap();
            let ba = reconstruction_loss(&mut g, &net, b, a, 1.0, 10.0).unwrap();
            prop_assert!(g.scalar(ab.total) >= 0.0);
            prop_assert_eq!(g.scalar(ab.total), g.scalar(ba.total));
        }
    }
}
