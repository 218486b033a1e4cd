//! Self-checks runnable from the binary: each suite prints one line.

use crate::error::{CliError, CliResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcct_core::attention::{AttentionKind, AttentionSpec};
use tcct_core::complexity::{analytic_canonical, analytic_csp, measure_block, receptive_report, Growth};
use tcct_core::connectors::{receptive_span, ConnectorConfig};
use tcct_core::model::{ForwardCtx, Model, ModelConfig, VariantPreset};
use tcct_core::tensor::{finite_diff_check, SeqTensor, Shape, Tape};
use tcct_core::train::{metrics, repeat_stats};

type Suite = fn() -> Result<(), String>;

pub const SUITES: [(&str, Suite); 5] = [
    ("complexity", complexity),
    ("receptive", receptive),
    ("causality", causality),
    ("gradients", gradients),
    ("metrics", metric_oracles),
];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn complexity() -> Result<(), String> {
    for (l, d, h) in [(16usize, 16usize, 2usize), (32, 8, 1), (64, 32, 4)] {
        let (lu, du, hu) = (l as u64, d as u64, h as u64);
        let a = analytic_canonical(lu, du, hu).map_err(|e| e.to_string())?;
        let c = analytic_csp(lu, du, hu).map_err(|e| e.to_string())?;
        ensure(2 * c.analytic_mults < a.analytic_mults, || format!("csp not below half at L={l} d={d}"))?;
        for csp in [false, true] {
            let spec = AttentionSpec::new(AttentionKind::Canonical, d, h).with_csp(csp);
            let m = measure_block(&spec, l, 1).map_err(|e| e.to_string())?;
            let i = &m.implementation;
            ensure(i.empirical_mults == Some(i.analytic_mults), || {
                format!("counted {:?} != {} at L={l} d={d} H={h} csp={csp}", i.empirical_mults, i.analytic_mults)
            })?;
        }
    }
    Ok(())
}

fn receptive() -> Result<(), String> {
    let dil = receptive_span(&[ConnectorConfig::dilated(); 2]);
    let can = receptive_span(&[ConnectorConfig::canonical(); 2]);
    ensure((dil, can) == (17, 13), || format!("two-stage spans {dil}/{can}, expected 17/13"))?;
    let r = receptive_report(5, 3).map_err(|e| e.to_string())?;
    ensure(
        r.dilated_growth == Growth::Exponential && r.canonical_growth == Growth::Linear,
        || format!("growth {:?}/{:?}", r.dilated_growth, r.canonical_growth),
    )
}

fn tensor(shape: Shape, seed: u64) -> SeqTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    SeqTensor::new(shape, data).expect("shape matches data")
}

fn causality() -> Result<(), String> {
    for preset in VariantPreset::ALL {
        let cfg = ModelConfig::new(preset, 32, 8, 2).with_dims(8, 2).with_seed(2);
        let model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
        let len = cfg.decoder_len();
        let enc_in = tensor(Shape::new(1, 32, 8), 1);
        let dec_a = tensor(Shape::new(1, len, 8), 2);
        let cut = len / 2;
        let mut dec_b = dec_a.clone();
        let noise = tensor(Shape::new(1, len, 8), 3);
        for t in cut + 1..len {
            for c in 0..8 {
                dec_b.set(0, t, c, noise.at(0, t, c));
            }
        }
        let run = |dec: &SeqTensor| -> Result<SeqTensor, String> {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, false);
            let mut ctx = ForwardCtx::new(9);
            let e = tape.constant(enc_in.clone());
            let e = model.encoder_forward(&mut tape, &bound, e, &mut ctx).map_err(|e| e.to_string())?;
            let d = tape.constant(dec.clone());
            let y = model.decoder_forward(&mut tape, &bound, d, e, &mut ctx).map_err(|e| e.to_string())?;
            Ok(tape.value(y).clone())
        };
        let (ya, yb) = (run(&dec_a)?, run(&dec_b)?);
        let d = ya.shape().dim;
        for t in 0..=cut {
            for c in 0..d {
                ensure(ya.at(0, t, c) == yb.at(0, t, c), || format!("{preset}: row {t} sees later decoder rows"))?;
            }
        }
    }
    Ok(())
}

fn gradients() -> Result<(), String> {
    for preset in VariantPreset::ALL {
        let mut cfg = ModelConfig::new(preset, 16, 8, 1).with_dims(8, 2).with_seed(4);
        cfg.token_len = 8;
        cfg.enc_blocks = 2;
        let model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
        let input = tensor(Shape::new(1, 16, 1), 5);
        let target = tensor(Shape::new(1, 8, 1), 6);
        let batch = tcct_core::model::Batch {
            input,
            target: target.clone(),
            marks_in: None,
            marks_dec: None,
        };
        let report = finite_diff_check::<tcct_core::Error, _>(
            |tape, vars| {
                let bound = model.store.bind_values(vars);
                let pred = model.forward(tape, &bound, &batch, &mut ForwardCtx::new(3))?;
                let t = tape.constant(target.clone());
                Ok(tape.mse(pred, t)?)
            },
            model.store.values(),
            1e-5,
            1e-4,
            Some(2),
        )
        .map_err(|e| e.to_string())?;
        ensure(report.pass, || format!("{preset}: {report}"))?;
    }
    Ok(())
}

fn metric_oracles() -> Result<(), String> {
    let m = metrics(&[1.0, 2.0, 3.0], &[2.0, 4.0, 3.0]).map_err(|e| e.to_string())?;
    ensure((m.mse - 5.0 / 3.0).abs() < 1e-12 && (m.mae - 1.0).abs() < 1e-12, || format!("{m:?}"))?;
    let s = repeat_stats(&[0.3; 10]).map_err(|e| e.to_string())?;
    ensure(s.msd == 0.0 && s.cv_percent == Some(0.0), || format!("{s:?}"))?;
    let s = repeat_stats(&[1.0, 3.0]).map_err(|e| e.to_string())?;
    ensure(s.msd == 1.0 && s.cv_percent == Some(50.0), || format!("{s:?}"))
}

/// Runs the named suites (all when `only` is empty) and fails with the
/// number of failing suites.
pub fn check(only: &[String]) -> CliResult<()> {
    for name in only {
        if !SUITES.iter().any(|(n, _)| n == name) {
            return Err(CliError::Config(format!("unknown suite `{name}`")));
        }
    }
    let mut failed = 0;
    for (name, suite) in SUITES {
        if !only.is_empty() && !only.iter().any(|n| n == name) {
            continue;
        }
        match suite() {
            Ok(()) => println!("pass  {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        Err(CliError::CheckFailed(failed))
    } else {
        Ok(())
    }
}
