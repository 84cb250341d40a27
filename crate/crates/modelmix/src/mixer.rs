//! Virtual encoders by convex interpolation of convolution parameters.
//!
//! One encoder layer is selected uniformly at random and its kernel and bias
//! are mixed as `lambda*p_i + (1-lambda)*p_j`; every other layer keeps the
//! base encoder's parameters. The premise this rests on, that interpolating
//! convolution parameters interpolates the features, is checkable with
//! [`verify_feature_linearity`] and fails past a nonlinearity by design.

use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Element, Tape, Tensor4};
use crate::nets::{
    enumerate_encoder_layers, ConvParams, ConvVars, Encoder, LayerAddress, ModelVars, UNetConfig,
};
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl Default for BetaParams {
    fn default() -> Self {
        // least-assuming choice: uniform on [0, 1]
        BetaParams { a: 1.0, b: 1.0 }
    }
}

impl BetaParams {
    pub fn validate(&self) -> Result<()> {
        if self.a <= 0.0 || self.b <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta parameters must be positive, got ({}, {})",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// One sampled virtual-encoder recipe: mix `layer` of the two task encoders
/// with ratio `lambda` toward task `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub task_i: String,
    pub task_j: String,
    pub layer: LayerAddress,
    pub lambda: f64,
}

/// Draw a mixing ratio in `[0, 1]`.
pub fn sample_lambda(beta: &BetaParams, rng: &mut SeededRng) -> Result<f64> {
    beta.validate()?;
    rng.beta(beta.a, beta.b)
}

/// Draw a full plan: uniform layer choice plus a beta-distributed lambda.
pub fn sample_plan(
    task_i: &str,
    task_j: &str,
    cfg: &UNetConfig,
    beta: &BetaParams,
    rng: &mut SeededRng,
) -> Result<MixPlan> {
    let layers = enumerate_encoder_layers(cfg);
    let layer = layers[rng.below(layers.len())];
    let lambda = sample_lambda(beta, rng)?;
    Ok(MixPlan {
        task_i: task_i.to_string(),
        task_j: task_j.to_string(),
        layer,
        lambda,
    })
}

/// `lambda*p_i + (1-lambda)*p_j`, elementwise on kernel and bias.
pub fn mix_conv<E: Element>(
    p_i: &ConvParams<E>,
    p_j: &ConvParams<E>,
    lambda: f64,
) -> Result<ConvParams<E>> {
    if !p_i.same_shape(p_j) {
        return Err(Error::shape(
            "mix_conv",
            format!(
                "kernel {} bias[{}] vs kernel {} bias[{}]",
                p_i.kernel.shape(),
                p_i.bias.len(),
                p_j.kernel.shape(),
                p_j.bias.len()
            ),
        ));
    }
    let kernel = diffcore::lerp(&p_i.kernel, &p_j.kernel, lambda)?;
    let bias = p_i
        .bias
        .iter()
        .zip(&p_j.bias)
        .map(|(&a, &b)| E::from_f64(lambda * a.to_f64() + (1.0 - lambda) * b.to_f64()))
        .collect();
    Ok(ConvParams { kernel, bias })
}

fn encoders_compatible(a: &UNetConfig, b: &UNetConfig) -> bool {
    a.depth == b.depth && a.base_channels == b.base_channels && a.in_channels == b.in_channels
}

/// Read-only view computing with `base`'s parameters everywhere except the
/// planned layer, where the mix of both encoders is used. Neither encoder's
/// storage is touched.
pub struct VirtualEncoder<'a, E: Element> {
    base: &'a Encoder<E>,
    other: &'a Encoder<E>,
    plan: MixPlan,
}

/// Build the virtual-encoder view for a plan (base = task i).
pub fn build_virtual_encoder<'a, E: Element>(
    enc_i: &'a Encoder<E>,
    enc_j: &'a Encoder<E>,
    plan: MixPlan,
) -> Result<VirtualEncoder<'a, E>> {
    if !encoders_compatible(enc_i.cfg(), enc_j.cfg()) {
        return Err(Error::InvalidConfig(format!(
            "encoders are architecturally incompatible: depth {}/{} base {}/{} in {}/{}",
            enc_i.cfg().depth,
            enc_j.cfg().depth,
            enc_i.cfg().base_channels,
            enc_j.cfg().base_channels,
            enc_i.cfg().in_channels,
            enc_j.cfg().in_channels
        )));
    }
    if !(0.0..=1.0).contains(&plan.lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be in [0, 1], got {}",
            plan.lambda
        )));
    }
    // address must resolve in both encoders
    enc_i.conv(plan.layer)?;
    enc_j.conv(plan.layer)?;
    Ok(VirtualEncoder {
        base: enc_i,
        other: enc_j,
        plan,
    })
}

impl<E: Element> VirtualEncoder<'_, E> {
    pub fn plan(&self) -> &MixPlan {
        &self.plan
    }

    pub fn cfg(&self) -> &UNetConfig {
        self.base.cfg()
    }

    /// Parameters the view presents at `addr`.
    pub fn conv_at(&self, addr: LayerAddress) -> Result<ConvParams<E>> {
        if addr == self.plan.layer {
            mix_conv(
                self.base.conv(addr)?,
                self.other.conv(addr)?,
                self.plan.lambda,
            )
        } else {
            Ok(self.base.conv(addr)?.clone())
        }
    }

    /// Eval-style forward through the virtual encoder and a task decoder.
    pub fn forward_with_decoder(
        &self,
        decoder: &crate::nets::Decoder<E>,
        x: &Tensor4<E>,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Tensor4<E>> {
        let cfg = decoder.cfg();
        cfg.check_input(x.shape())?;
        let mut ctx = crate::nets::EvalCtx {
            params: VirtualParams {
                view: self,
                decoder,
            },
            training,
            rng,
            _marker: std::marker::PhantomData,
        };
        let (probs, _) = crate::nets::unet_forward(&mut ctx, cfg, x.clone())?;
        Ok(probs)
    }
}

struct VirtualParams<'a, E: Element> {
    view: &'a VirtualEncoder<'a, E>,
    decoder: &'a crate::nets::Decoder<E>,
}

impl<E: Element> crate::nets::ParamSource<E> for VirtualParams<'_, E> {
    fn conv_at(&self, slot: crate::nets::LayerSlot) -> Result<crate::nets::ParamRef<'_, E>> {
        use crate::nets::{LayerSlot, ParamRef};
        match slot {
            LayerSlot::Enc(s, c) => {
                let addr = LayerAddress { stage: s, conv: c };
                if addr == self.view.plan.layer {
                    Ok(ParamRef::Owned(self.view.conv_at(addr)?))
                } else {
                    Ok(ParamRef::Borrowed(self.view.base.conv(addr)?))
                }
            }
            LayerSlot::Dec(..) | LayerSlot::Head => {
                let direct = crate::nets::DirectParams {
                    encoder: self.view.base,
                    decoder: self.decoder,
                };
                direct.conv_at(slot)
            }
        }
    }
}

/// Tape-side mixed layer: gradients through the returned vars flow to both
/// encoders' leaves, scaled by `lambda` and `1 - lambda`.
pub fn virtual_conv_vars<E: Element>(
    tape: &mut Tape<E>,
    vars_i: &ModelVars,
    vars_j: &ModelVars,
    plan: &MixPlan,
) -> Result<ConvVars> {
    let a = plan.layer;
    let (ci, cj) = (vars_i.enc[a.stage][a.conv], vars_j.enc[a.stage][a.conv]);
    Ok(ConvVars {
        kernel: tape.lerp(ci.kernel, cj.kernel, plan.lambda)?,
        bias: tape.lerp(ci.bias, cj.bias, plan.lambda)?,
    })
}

/// Max-abs difference between `conv(x, mix(p_i, p_j, lambda))` and
/// `lambda*conv(x, p_i) + (1-lambda)*conv(x, p_j)`.
///
/// With `with_nonlinearity` a relu is applied to each of the three terms
/// before comparison; the property is expected to fail there, which is the
/// negative control for the premise.
pub fn verify_feature_linearity<E: Element>(
    p_i: &ConvParams<E>,
    p_j: &ConvParams<E>,
    lambda: f64,
    x: &Tensor4<E>,
    with_nonlinearity: bool,
) -> Result<f64> {
    let pad = (p_i.kernel.shape().h - 1) / 2;
    let mixed = mix_conv(p_i, p_j, lambda)?;
    let mut ym = diffcore::conv2d(x, &mixed.kernel, &mixed.bias, 1, pad)?;
    let mut yi = diffcore::conv2d(x, &p_i.kernel, &p_i.bias, 1, pad)?;
    let mut yj = diffcore::conv2d(x, &p_j.kernel, &p_j.bias, 1, pad)?;
    if with_nonlinearity {
        ym = diffcore::relu(&ym);
        yi = diffcore::relu(&yi);
        yj = diffcore::relu(&yj);
    }
    let combo = diffcore::lerp(&yi, &yj, lambda)?;
    Ok(ym.max_abs_diff(&combo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Shape4;
    use crate::nets::{build_model, forward_on_tape_with_override, insert_model, SegModel};

    fn cfg() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.0,
        }
    }

    fn rand_params(out: usize, inp: usize, rng: &mut SeededRng) -> ConvParams<f64> {
        let mut kernel = Tensor4::zeros(Shape4::new(out, inp, 3, 3));
        kernel.fill_uniform(1.0, rng);
        let bias = (0..out).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        ConvParams { kernel, bias }
    }

    #[test]
    fn lambda_endpoints_exact() {
        let mut rng = SeededRng::from_seed(1);
        let a = rand_params(3, 2, &mut rng);
        let b = rand_params(3, 2, &mut rng);
        assert_eq!(mix_conv(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_conv(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn midpoint_arithmetic() {
        let a = ConvParams::<f64> {
            kernel: Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![1.0]).unwrap(),
            bias: vec![2.0],
        };
        let b = ConvParams::<f64> {
            kernel: Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![3.0]).unwrap(),
            bias: vec![4.0],
        };
        let m = mix_conv(&a, &b, 0.5).unwrap();
        assert_eq!(m.kernel.data(), &[2.0]);
        assert_eq!(m.bias, vec![3.0]);
    }

    #[test]
    fn mix_conv_shape_error_names_both_shapes() {
        let mut rng = SeededRng::from_seed(2);
        let a = rand_params(3, 2, &mut rng);
        let b = rand_params(4, 2, &mut rng);
        let err = mix_conv(&a, &b, 0.5).unwrap_err().to_string();
        assert!(
            err.contains("(3, 2, 3, 3)") && err.contains("(4, 2, 3, 3)"),
            "{err}"
        );
    }

    #[test]
    fn sample_lambda_in_range_and_reproducible() {
        let beta = BetaParams::default();
        let mut r1 = SeededRng::from_seed(3);
        let mut r2 = SeededRng::from_seed(3);
        for _ in 0..200 {
            let a = sample_lambda(&beta, &mut r1).unwrap();
            let b = sample_lambda(&beta, &mut r2).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a, b);
        }
        assert!(sample_lambda(&BetaParams { a: 0.0, b: 1.0 }, &mut r1).is_err());
    }

    #[test]
    fn feature_linearity_holds_without_nonlinearity() {
        let mut rng = SeededRng::from_seed(4);
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let p_i = rand_params(4, 3, &mut rng);
            let p_j = rand_params(4, 3, &mut rng);
            let mut x = Tensor4::<f64>::zeros(Shape4::new(2, 3, 8, 8));
            x.fill_uniform(1.0, &mut rng);
            let err = verify_feature_linearity(&p_i, &p_j, lambda, &x, false).unwrap();
            assert!(err < 1e-9, "lambda {lambda}: {err}");
        }
    }

    #[test]
    fn feature_linearity_zero_for_identical_params() {
        let mut rng = SeededRng::from_seed(5);
        // f32 storage: the mixed parameters round back to the originals
        let kernel = {
            let mut k = Tensor4::<f32>::zeros(Shape4::new(2, 1, 3, 3));
            k.fill_uniform(1.0, &mut rng);
            k
        };
        let p = ConvParams {
            kernel,
            bias: vec![0.25, -0.5],
        };
        let mut x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 6, 6));
        x.fill_uniform(1.0, &mut rng);
        let err = verify_feature_linearity(&p, &p, 0.37, &x, false).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relu_negative_control_breaks_linearity() {
        let mut rng = SeededRng::from_seed(6);
        let p_i = rand_params(4, 2, &mut rng);
        // sign-flipped parameters force sign-mixed activations
        let p_j = ConvParams {
            kernel: diffcore::scalar_scale(&p_i.kernel, -1.0),
            bias: p_i.bias.iter().map(|b| -b).collect(),
        };
        let mut x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 8, 8));
        x.fill_uniform(1.0, &mut rng);
        let err = verify_feature_linearity(&p_i, &p_j, 0.5, &x, true).unwrap();
        assert!(err > 1e-3, "relu control unexpectedly linear: {err}");
        let clean = verify_feature_linearity(&p_i, &p_j, 0.5, &x, false).unwrap();
        assert!(clean < 1e-9);
    }

    #[test]
    fn virtual_encoder_endpoints_and_identity() {
        let cfg = cfg();
        let mut rng = SeededRng::from_seed(7);
        let mi: SegModel<f32> = build_model(cfg, "i", &mut rng).unwrap();
        let mj: SegModel<f32> = build_model(cfg, "j", &mut rng).unwrap();
        let mut x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 8, 8));
        x.fill_uniform(1.0, &mut rng);
        let base_out = mi.forward(&x, false, &mut SeededRng::from_seed(0)).unwrap();

        // lambda = 1 reproduces the base model bitwise
        let plan = MixPlan {
            task_i: "i".into(),
            task_j: "j".into(),
            layer: LayerAddress { stage: 1, conv: 0 },
            lambda: 1.0,
        };
        let view = build_virtual_encoder(&mi.encoder, &mj.encoder, plan).unwrap();
        let out = view
            .forward_with_decoder(&mi.decoder, &x, false, &mut SeededRng::from_seed(0))
            .unwrap();
        assert_eq!(out, base_out);

        // identical encoders are a fixed point for any lambda
        let plan = MixPlan {
            task_i: "i".into(),
            task_j: "i".into(),
            layer: LayerAddress { stage: 0, conv: 1 },
            lambda: 0.431,
        };
        let view = build_virtual_encoder(&mi.encoder, &mi.encoder, plan).unwrap();
        let out = view
            .forward_with_decoder(&mi.decoder, &x, false, &mut SeededRng::from_seed(0))
            .unwrap();
        assert_eq!(out, base_out);
    }

    #[test]
    fn virtual_encoder_does_not_mutate_sources() {
        let cfg = cfg();
        let mut rng = SeededRng::from_seed(8);
        let mi: SegModel<f32> = build_model(cfg, "i", &mut rng).unwrap();
        let mj: SegModel<f32> = build_model(cfg, "j", &mut rng).unwrap();
        let (enc_i_before, enc_j_before) = (mi.encoder.clone(), mj.encoder.clone());
        let plan = MixPlan {
            task_i: "i".into(),
            task_j: "j".into(),
            layer: LayerAddress { stage: 0, conv: 0 },
            lambda: 0.5,
        };
        let view = build_virtual_encoder(&mi.encoder, &mj.encoder, plan).unwrap();
        let mut x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 8, 8));
        x.fill_uniform(1.0, &mut rng);
        view.forward_with_decoder(&mi.decoder, &x, false, &mut SeededRng::from_seed(0))
            .unwrap();
        assert_eq!(mi.encoder, enc_i_before);
        assert_eq!(mj.encoder, enc_j_before);
    }

    #[test]
    fn mixed_layer_gradient_splits_by_lambda() {
        let cfg = cfg();
        let mut rng = SeededRng::from_seed(9);
        let mi: SegModel<f64> = build_model(cfg, "i", &mut rng).unwrap();
        let mj: SegModel<f64> = build_model(cfg, "j", &mut rng).unwrap();
        let lambda = 0.3;
        let plan = MixPlan {
            task_i: "i".into(),
            task_j: "j".into(),
            layer: LayerAddress { stage: 1, conv: 1 },
            lambda,
        };
        let mut x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 8, 8));
        x.fill_uniform(1.0, &mut rng);

        let mut tape = Tape::new();
        let vars_i = insert_model(&mut tape, &mi);
        let vars_j = insert_model(&mut tape, &mj);
        let mixed = virtual_conv_vars(&mut tape, &vars_i, &vars_j, &plan).unwrap();
        let xv = tape.constant(x.clone());
        let probs = forward_on_tape_with_override(
            &mut tape,
            &vars_i,
            &cfg,
            plan.layer,
            mixed,
            xv,
            false,
            &mut SeededRng::from_seed(0),
        )
        .unwrap();
        let w: Vec<f64> = (0..tape.value(probs).shape().len())
            .map(|_| rng.range_f64(-1.0, 1.0))
            .collect();
        let loss = tape.weighted_sum(probs, &w).unwrap();
        tape.backward(loss).unwrap();

        let a = plan.layer;
        let g_mixed = tape.grad(mixed.kernel).unwrap().to_vec();
        let g_j = tape
            .grad(vars_j.enc[a.stage][a.conv].kernel)
            .unwrap()
            .to_vec();
        let g_i = tape
            .grad(vars_i.enc[a.stage][a.conv].kernel)
            .unwrap()
            .to_vec();
        for ((gm, gj), gi) in g_mixed.iter().zip(&g_j).zip(&g_i) {
            assert!((gj - (1.0 - lambda) * gm).abs() < 1e-12);
            // the overridden layer is out of the base path, so enc_i's share
            // at this layer is exactly the lambda-scaled mixed gradient
            assert!((gi - lambda * gm).abs() < 1e-12);
        }

        // finite-difference spot check on a few kernel elements of enc_j
        let analytic = &g_j;
        let eps = 1e-6;
        for idx in [0usize, 7, 23] {
            let base = mj.encoder.conv(a).unwrap().kernel.data()[idx];
            let eval = |v: f64| -> f64 {
                let mut mj2 = mj.clone();
                let mut p = mj2.get_conv(a).unwrap();
                p.kernel.data_mut()[idx] = v;
                mj2.set_conv(a, p).unwrap();
                let view =
                    build_virtual_encoder(&mi.encoder, &mj2.encoder, plan.clone()).unwrap();
                let out = view
                    .forward_with_decoder(&mi.decoder, &x, false, &mut SeededRng::from_seed(0))
                    .unwrap();
                out.data().iter().zip(&w).map(|(p, wi)| p * wi).sum()
            };
            let numeric = (eval(base + eps) - eval(base - eps)) / (2.0 * eps);
            assert!(
                (numeric - analytic[idx]).abs() < 1e-4,
                "idx {idx}: fd {numeric} vs {}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn layer_selection_uniform_chi_square() {
        let cfg = UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            num_classes: 3,
            dropout_rate: 0.5,
        };
        let beta = BetaParams::default();
        let mut rng = SeededRng::from_seed(10);
        let layers = enumerate_encoder_layers(&cfg);
        let mut counts = vec![0usize; layers.len()];
        let draws = 6000;
        for _ in 0..draws {
            let plan = sample_plan("a", "b", &cfg, &beta, &mut rng).unwrap();
            let k = layers.iter().position(|&l| l == plan.layer).unwrap();
            counts[k] += 1;
        }
        let expect = draws as f64 / layers.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expect).powi(2) / expect)
            .sum();
        // critical value for df = 5 at p = 0.01
        assert!(chi2 < 15.086, "chi-square {chi2}, counts {counts:?}");
    }

    #[test]
    fn incompatible_configs_rejected() {
        let mut rng = SeededRng::from_seed(11);
        let a: SegModel<f32> = build_model(cfg(), "a", &mut rng).unwrap();
        let other = UNetConfig {
            depth: 3,
            base_channels: 4,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.0,
        };
        let b: SegModel<f32> = build_model(other, "b", &mut rng).unwrap();
        let plan = MixPlan {
            task_i: "a".into(),
            task_j: "b".into(),
            layer: LayerAddress { stage: 0, conv: 0 },
            lambda: 0.5,
        };
        assert!(build_virtual_encoder(&a.encoder, &b.encoder, plan).is_err());
    }
}
