mod common;

use std::f64::consts::{E, TAU};
use std::sync::Arc;

use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

use mehler_core::control::{ControlSystem, Weight};
use mehler_core::evolution::{OperatorFamily, Propagator, StructureTags};
use mehler_core::harnack::{gamma_apply, GammaOperator};
use mehler_core::kernel::{MehlerSystem, NoiseRate};
use mehler_core::measures::{limit_triplet, StabilityHint};
use mehler_core::triplet::{Atom, IdTriplet, LevyMeasure};

const H: f64 = 1.0 / 256.0;

fn ou(a: f64, r: f64) -> MehlerSystem {
    let prop = Propagator::new(OperatorFamily::constant(dmatrix![a]), H).unwrap();
    let rate = IdTriplet::new(dvector![0.0], dmatrix![r], LevyMeasure::empty()).unwrap();
    MehlerSystem::new(Arc::new(prop), NoiseRate::constant(rate)).unwrap()
}

/// `∫_s^t e^{2a(t−r)} dr` from its antiderivative.
fn ou_variance(a: f64, s: f64, t: f64) -> f64 {
    ((2.0 * a * (t - s)).exp() - 1.0) / (2.0 * a)
}

#[test]
fn scalar_covariance_matches_antiderivative() {
    let sys = ou(-1.0, 1.0);
    let r10 = sys.build_triplet(0.0, 1.0).unwrap().r[(0, 0)];
    assert_relative_eq!(r10, (1.0 - E.powi(-2)) / 2.0, max_relative = 1e-3);
    assert_relative_eq!(r10, ou_variance(-1.0, 0.0, 1.0), max_relative = 1e-3);
    for (s, t) in [(0.0, 0.5), (0.25, 2.0), (1.0, 4.0)] {
        let got = sys.build_triplet(s, t).unwrap().r[(0, 0)];
        assert_relative_eq!(got, ou_variance(-1.0, s, t), max_relative = 1e-4);
    }
}

#[test]
fn scalar_limit_covariance_is_one_half() {
    let sys = ou(-1.0, 1.0);
    let hint = StabilityHint::new(1.0, 1.0).unwrap();
    for t in [0.0, 1.0, 3.5] {
        let lim = limit_triplet(&sys, t, &hint, 1e-6).unwrap();
        assert_relative_eq!(lim.nu.r[(0, 0)], 0.5, max_relative = 1e-3);
        assert!(lim.tail_bound <= 1e-6);
    }
}

#[test]
fn scalar_min_energy_and_gamma() {
    let sys = ou(-1.0, 1.0);
    let r10 = (1.0 - E.powi(-2)) / 2.0;
    let csys = ControlSystem::constant(Arc::clone(&sys.prop), dmatrix![1.0]);
    let x = dvector![1.0];
    let energy = csys.min_energy(0.0, 1.0, &x).unwrap();
    assert_relative_eq!(energy, E.powi(-2) / r10, max_relative = 1e-3);
    let g = gamma_apply(&sys, 0.0, 1.0, &x).unwrap();
    assert_relative_eq!(g, E.powi(-1) / r10.sqrt(), max_relative = 1e-3);
    let op = GammaOperator::for_system(&sys, 0.0, 1.0).unwrap();
    assert_relative_eq!(op.operator_norm(), g, max_relative = 1e-12);
}

#[test]
fn brownian_gramian_is_linear_in_time() {
    let sys = ou(0.0, 2.0);
    for t in [0.5, 1.0, 3.0] {
        assert_relative_eq!(sys.build_triplet(0.0, t).unwrap().r[(0, 0)], 2.0 * t, max_relative = 1e-12);
    }
    let csys = ControlSystem::constant(Arc::clone(&sys.prop), dmatrix![1.0]);
    assert_relative_eq!(csys.min_energy(0.0, 2.0, &dvector![3.0]).unwrap(), 4.5, max_relative = 1e-10);
}

#[test]
fn diagonal_sinusoid_propagator_matches_closed_form() {
    let (o, amp, p) = (1.0, 0.5, 1.0);
    let family = OperatorFamily::new(
        1,
        Arc::new(move |t| dmatrix![-(o + amp * (TAU * t / p).sin())]),
        StructureTags { constant: false, commuting: true, periodic: Some(p) },
    );
    let prop = Propagator::new(family, H).unwrap();
    let exact = |s: f64, t: f64| (-(o * (t - s)) - amp * p / TAU * ((TAU * s / p).cos() - (TAU * t / p).cos())).exp();
    for (s, t) in [(0.0, 1.0), (0.25, 0.75), (0.5, 3.0)] {
        assert_relative_eq!(prop.propagate(s, t).unwrap()[(0, 0)], exact(s, t), max_relative = 1e-9);
    }
}

#[test]
fn rotation_propagator_matches_matrix_exponential() {
    let a = dmatrix![-0.5, 1.0; -1.0, -0.5];
    let prop = Propagator::new(OperatorFamily::constant(a), H).unwrap();
    let t: f64 = 1.75;
    let decay = (-0.5 * t).exp();
    let exact = dmatrix![decay * t.cos(), decay * t.sin(); -decay * t.sin(), decay * t.cos()];
    assert!((prop.propagate(0.0, t).unwrap() - exact).amax() < 1e-10);
}

#[test]
fn compound_poisson_exponent_matches_formula() {
    let prop = Propagator::new(OperatorFamily::zero(1), H).unwrap();
    let m = LevyMeasure::new(vec![Atom { x: dvector![1.0], w: 2.0 }]).unwrap();
    let rate = IdTriplet::new(dvector![0.0], DMatrix::zeros(1, 1), m).unwrap();
    let sys = MehlerSystem::new(Arc::new(prop), NoiseRate::constant(rate)).unwrap();
    let t = 1.5;
    for xi in [0.3, 1.0, 2.5] {
        let psi = sys.char_exponent(0.0, t, &dvector![xi]).unwrap();
        let re = 2.0 * t * (1.0 - xi.cos());
        let im = 2.0 * t * (-xi.sin() + xi / 2.0);
        assert_relative_eq!(psi.re, re, max_relative = 1e-12);
        assert_relative_eq!(psi.im, im, epsilon = 1e-12);
    }
}

#[test]
fn ou_jump_mean_matches_integrated_drift() {
    // mean of μ_{t,0} for compensated jumps under A = −1: rate mean is w x |x|²/(1+|x|²)
    let prop = Propagator::new(OperatorFamily::constant(dmatrix![-1.0]), H).unwrap();
    let m = LevyMeasure::new(vec![Atom { x: dvector![2.0], w: 0.5 }]).unwrap();
    let rate = IdTriplet::new(dvector![0.0], DMatrix::zeros(1, 1), m).unwrap();
    let sys = MehlerSystem::new(Arc::new(prop), NoiseRate::constant(rate)).unwrap();
    let trip = sys.build_triplet(0.0, 1.0).unwrap();
    let mean_rate = 0.5 * 2.0 * 4.0 / 5.0;
    let expected = mean_rate * (1.0 - E.powi(-1));
    let mean = trip.centered_drift()[0] + trip.m.atoms().iter().map(|a| a.w * a.x[0]).sum::<f64>();
    assert_relative_eq!(mean, expected, max_relative = 1e-4);
}

#[test]
fn optimal_weight_attains_min_energy_for_scalar_ou() {
    // ξ(r) = e^{2(r−s)} is the optimal weight when A = −1, C = 1
    let sys = ou(-1.0, 1.0);
    let csys = ControlSystem::constant(Arc::clone(&sys.prop), dmatrix![1.0]);
    let x = dvector![0.7];
    let cert = csys.synthesize_control(0.0, 1.0, &x, &Weight::Exponential { beta: 2.0 }).unwrap();
    assert_relative_eq!(cert.energy.unwrap(), cert.min_energy, max_relative = 1e-3);
    let flat = csys.synthesize_control(0.0, 1.0, &x, &Weight::Constant).unwrap();
    assert!(flat.energy.unwrap() > cert.energy.unwrap());
    assert!(flat.transfer_residual.unwrap() < 1e-6);
}

#[test]
fn gamma_of_rank_deficient_noise_follows_rotation() {
    let lab = common::lab("rot2_mixed");
    let g = GammaOperator::for_system(&lab.mehler, 0.0, 1.0).unwrap();
    assert!(g.null_controllable());
    let v = DVector::from_vec(vec![0.3, -0.2]);
    let direct = g.norm(&v);
    assert!((direct - (&g.gamma * &v).norm()).abs() < 1e-10 * (1.0 + direct));
}
