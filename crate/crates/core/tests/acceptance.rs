//! Acceptance gate: one test per shipping criterion, each printing a
//! `criterion N: PASS — ...` line (visible with `--nocapture`) and failing
//! loudly otherwise. Tolerances are pinned as constants next to each check.
//!
//! Trained-model criteria share a disk-cached fixture under
//! `CARGO_TARGET_TMPDIR`: the default corpus plus five training variants
//! (full objective, no alignment, each alignment alone, and video-pooled
//! queries) at the same step budget and seed. Training is deterministic, so
//! cached checkpoints are byte-identical to freshly trained ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use once_cell::sync::Lazy;

use vast_core::datagen::{DataConfig, Dataset, Split};
use vast_core::dsp::{
    self, Grid, RatioMask, StftParams, Waveform, MASK_DENOM_FLOOR,
};
use vast_core::evalrun::{composite_target, eval_audiovisual, eval_language, mean_nsdr};
use vast_core::foundation::{
    attention_pool, extract_latent_caption, AttnMode, ConceptSpace, EmbeddingGrid, Modality,
};
use vast_core::linalg;
use vast_core::losses::{
    audio_language_loss, mask_loss, trimodal_loss, CaptionVocabulary, LossError,
};
use vast_core::metrics::{
    bss_decompose, nsdr, sdr, BssDecomposition, ReportRow, BSS_JITTER, TOY_FILTER_TAPS,
};
use vast_core::sepmodel::SepModel;
use vast_core::tensor::{
    grad_check, op_gradcheck_suite, Array, TensorError, GRADCHECK_STEP, GRADCHECK_TOL,
};
use vast_core::trainer::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, train, MilMode, TrainConfig,
};
use vast_core::util;

// Pinned acceptance tolerances.
const GRAD_TOL: f64 = GRADCHECK_TOL; // 1e-4
const GRAD_SUITE_MAX_SECS: f64 = 120.0;
const MASK_SUM_TOL: f64 = 1e-12;
const ISTFT_MIN_INTERIOR_SNR_DB: f64 = 60.0;
const ORACLE_MASK_MIN_NSDR_DB: f64 = 8.0;
const DSP_MAX_SECS: f64 = 120.0;
const BSS_ORACLE_TOL: f64 = 1e-8;
const SDR_SCALE_TOL_DB: f64 = 1e-9;
const INVERSION_OPTIMALITY: f64 = 0.999;
const INVERSION_MAX_SECS: f64 = 180.0;
const AL_LIFT_MIN_DB: f64 = 2.0;
const AL_BASELINE_MAX_DB: f64 = 0.0;
const AL_MAX_SECS: f64 = 1800.0;
const MIL_LIFT_MIN_DB: f64 = 1.0;
const ABLATION_SLACK_DB: f64 = 0.5;
const MASK_CURVE_RATIO: f64 = 0.5;

fn cache_root() -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&root).expect("create acceptance cache dir");
    root
}

/// The default corpus, generated once and reloaded on later runs.
static DATA: Lazy<Dataset> = Lazy::new(|| {
    let dir = cache_root().join("data");
    if dir.join("manifest.jsonl").is_file() {
        Dataset::load(&dir).expect("reload cached corpus")
    } else {
        Dataset::generate(DataConfig::default(), &dir).expect("generate corpus")
    }
});

struct TrainedVariant {
    cfg: TrainConfig,
    model: SepModel,
    /// Wall time actually spent training in this process (0 when cached).
    train_secs: f64,
    dir: PathBuf,
}

fn train_variant(name: &str, mutate: impl FnOnce(&mut TrainConfig)) -> TrainedVariant {
    let mut cfg = TrainConfig::default();
    mutate(&mut cfg);
    let dir = cache_root().join(format!("run-{name}-{:016x}", cfg.hash()));
    let ckpt_path = dir.join("checkpoint.bin");
    let (ckpt, train_secs) = if ckpt_path.is_file() {
        (load_checkpoint(&ckpt_path).expect("load cached checkpoint"), 0.0)
    } else {
        let t0 = Instant::now();
        let outcome = train(&DATA, &cfg, &dir, None, false).expect("training run");
        (outcome.checkpoint, t0.elapsed().as_secs_f64())
    };
    let model = model_from_checkpoint(&ckpt, cfg.sep).expect("rebuild model");
    TrainedVariant { cfg, model, train_secs, dir }
}

/// All five training variants at the default budget and seed.
static TRAINED: Lazy<BTreeMap<&'static str, TrainedVariant>> = Lazy::new(|| {
    let mut out = BTreeMap::new();
    out.insert("full", train_variant("full", |_| {}));
    out.insert(
        "none",
        train_variant("none", |c| {
            c.weights.lambda_al = 0.0;
            c.weights.lambda_tri = 0.0;
        }),
    );
    out.insert(
        "al-only",
        train_variant("al-only", |c| {
            c.weights.lambda_tri = 0.0;
        }),
    );
    out.insert(
        "tri-only",
        train_variant("tri-only", |c| {
            c.weights.lambda_al = 0.0;
        }),
    );
    out.insert(
        "pooled",
        train_variant("pooled", |c| {
            c.mil = MilMode::Video;
        }),
    );
    out
});

fn al_mean(v: &TrainedVariant) -> f64 {
    let rows = eval_language(&v.model, &DATA, &StftParams::compact(), TOY_FILTER_TAPS, None)
        .expect("language eval");
    mean_nsdr(&rows).expect("nonempty rows")
}

fn av_rows(v: &TrainedVariant) -> Vec<ReportRow> {
    eval_audiovisual(&v.model, &DATA, &StftParams::compact(), v.cfg.mil, TOY_FILTER_TAPS)
        .expect("audiovisual eval")
}

fn duet_side_mean(rows: &[ReportRow]) -> f64 {
    let sentinel = composite_target(DATA.space());
    let duet: Vec<ReportRow> =
        rows.iter().filter(|r| r.target_concept == sentinel).cloned().collect();
    mean_nsdr(&duet).expect("duet rows present")
}

fn loss_to_tensor(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("loss construction failed: {other}"),
    }
}

fn rand_array(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Array {
    let n = shape.iter().product();
    Array::new(shape, util::uniform_vec(rng, n, 0.05, 0.95)).expect("shape matches data")
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradients: every tensor op and every objective.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite_within_1e4() {
    let t0 = Instant::now();

    let entries = op_gradcheck_suite(2024).expect("op suite");
    let mut per_op: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (label, report) in &entries {
        let op = label.split('/').next().expect("label has op prefix");
        let slot = per_op.entry(op).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 = slot.1.max(report.max_rel_err);
    }
    const EXPECTED_OPS: [&str; 27] = [
        "add", "broadcast_batch", "clamp", "concat_channels", "conv2d", "conv_transpose2d",
        "cosine", "cross_entropy_logits", "kl_div", "l1_mean", "leaky_relu", "log", "matmul",
        "matvec", "mean_all", "mean_spatial", "mul", "reshape", "scale", "sigmoid", "softmax",
        "sub", "sum_all", "sum_batch", "sum_norm", "tile_spatial", "unit_normalize",
    ];
    for op in EXPECTED_OPS {
        let (count, worst) = per_op.get(op).unwrap_or_else(|| panic!("op {op} not checked"));
        assert!(*count >= 3, "{op}: only {count} instances");
        assert!(*worst <= GRAD_TOL, "{op}: max rel err {worst:.3e} > {GRAD_TOL:.0e}");
    }
    assert_eq!(per_op.len(), EXPECTED_OPS.len(), "unexpected extra op groups");
    let worst_op = entries
        .iter()
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0_f64, f64::max);

    // Three seeded instances of each objective.
    let mut worst_loss = 0.0_f64;
    for (i, s) in [3u64, 1019, 4242].into_iter().enumerate() {
        let mut rng = util::rng_from_seed(s);

        let point = vec![
            ("m1hat".to_string(), rand_array(&mut rng, vec![1, 3, 4])),
            ("m2hat".to_string(), rand_array(&mut rng, vec![1, 3, 4])),
        ];
        let t1 = rand_array(&mut rng, vec![1, 3, 4]);
        let t2 = rand_array(&mut rng, vec![1, 3, 4]);
        let r = grad_check(&point, GRADCHECK_STEP, 12, |g, ids| {
            let c1 = g.constant(t1.clone())?;
            let c2 = g.constant(t2.clone())?;
            mask_loss(g, ids["m1hat"], ids["m2hat"], c1, c2).map_err(loss_to_tensor)
        })
        .expect("mask gradcheck");
        worst_loss = worst_loss.max(r.max_rel_err);

        let d = 6;
        let mut vocab = CaptionVocabulary::new(d);
        for v in 0..4 {
            vocab
                .push(&format!("cap-{v}"), &util::gaussian_vec(&mut rng, d, 1.0))
                .expect("vocab entry");
        }
        let point = vec![("audio".to_string(), rand_array(&mut rng, vec![d]))];
        let r = grad_check(&point, GRADCHECK_STEP, 12, |g, ids| {
            audio_language_loss(g, ids["audio"], "cap-2", &vocab, 0.07).map_err(loss_to_tensor)
        })
        .expect("alignment gradcheck");
        worst_loss = worst_loss.max(r.max_rel_err);

        let grid = EmbeddingGrid {
            t: 2,
            h: 2,
            w: 2,
            d,
            values: util::gaussian_vec(&mut rng, 2 * 2 * 2 * d, 1.0),
            modality: Modality::VisualRegion,
        };
        let caption = util::gaussian_vec(&mut rng, d, 1.0);
        // Share-of-total attention zeroes clamped negatives, which the KL
        // term rejects on unstructured random inputs; exercise the softmax
        // family at two temperatures instead (share-of-total gradients are
        // covered by the op suite's sum_norm group).
        let mode = if i == 2 { AttnMode::Softmax { tau: 0.5 } } else { AttnMode::Softmax { tau: 0.07 } };
        let point = vec![("audio".to_string(), rand_array(&mut rng, vec![d]))];
        let r = grad_check(&point, GRADCHECK_STEP, 12, |g, ids| {
            trimodal_loss(g, &grid, &caption, ids["audio"], mode).map_err(loss_to_tensor)
        })
        .expect("trimodal gradcheck");
        worst_loss = worst_loss.max(r.max_rel_err);
    }
    assert!(worst_loss <= GRAD_TOL, "objective rel err {worst_loss:.3e} > {GRAD_TOL:.0e}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs <= GRAD_SUITE_MAX_SECS, "gradient suite took {secs:.1}s");
    println!(
        "criterion 1: PASS — {} op checks (worst {:.2e}) + 9 objective checks (worst {:.2e}) \
         within {GRAD_TOL:.0e} in {secs:.1}s",
        entries.len(),
        worst_op,
        worst_loss
    );
}

// ---------------------------------------------------------------------------
// 2. Signal-path identities on the fixed-seed corpus.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_dsp_identities_hold() {
    let t0 = Instant::now();
    let params = StftParams::compact();
    let duets = DATA.duets(Split::Test);
    assert!(!duets.is_empty());

    let log_of = |w: &Waveform| {
        let spec = dsp::stft(w, params).expect("stft");
        (dsp::log_resample(&spec.magnitude, 32).expect("resample"), spec)
    };

    // Complementary masks sum to one wherever the denominator is live.
    let mut live_cells = 0usize;
    for rec in &duets {
        let refs = DATA.references(rec).expect("refs");
        let (la, _) = log_of(&refs[0]);
        let (lb, _) = log_of(&refs[1]);
        let (m1, m2) = dsp::ratio_masks(&la, &lb).expect("masks");
        for i in 0..m1.values.data().len() {
            let den = la.magnitude.data()[i] + lb.magnitude.data()[i];
            if den > MASK_DENOM_FLOOR {
                live_cells += 1;
                let s = m1.values.data()[i] + m2.values.data()[i];
                assert!((s - 1.0).abs() <= MASK_SUM_TOL, "mask sum {s} at cell {i}");
            }
        }
    }
    assert!(live_cells > 10_000, "too few live cells ({live_cells}) to be meaningful");

    // Analysis/synthesis round trip at both window settings.
    let mut min_snr = f64::INFINITY;
    for (pi, p) in [StftParams::compact(), StftParams::standard()].into_iter().enumerate() {
        for s in 0..2u64 {
            let n = if pi == 0 { 3937 } else { 65280 };
            let mut rng = util::rng_from_seed(900 + 10 * pi as u64 + s);
            let x = Waveform::new(util::uniform_vec(&mut rng, n, -0.5, 0.5), p.sample_rate)
                .expect("waveform");
            let spec = dsp::stft(&x, p).expect("stft");
            let f_log = if pi == 0 { 32 } else { 128 };
            let lg = dsp::log_resample(&spec.magnitude, f_log).expect("resample");
            let ones = RatioMask {
                values: Grid::new(
                    lg.magnitude.rows(),
                    lg.magnitude.cols(),
                    vec![1.0; lg.magnitude.rows() * lg.magnitude.cols()],
                )
                .expect("ones grid"),
            };
            let back = dsp::apply_mask(&ones, &lg, &spec).expect("resynthesis");
            let w = p.n_fft();
            let (sig, err): (f64, f64) = x.samples()[w..n - w]
                .iter()
                .zip(&back.samples()[w..n - w])
                .fold((0.0, 0.0), |(sg, er), (a, b)| (sg + a * a, er + (a - b) * (a - b)));
            let snr = 10.0 * (sig / err.max(1e-300)).log10();
            min_snr = min_snr.min(snr);
        }
    }
    assert!(
        min_snr >= ISTFT_MIN_INTERIOR_SNR_DB,
        "interior reconstruction SNR {min_snr:.1} dB < {ISTFT_MIN_INTERIOR_SNR_DB} dB"
    );

    // A constant spectrum survives log-frequency resampling bit-exactly.
    let c = 3.25;
    let flat = Grid::new(512, 8, vec![c; 512 * 8]).expect("flat grid");
    let lg = dsp::log_resample(&flat, 32).expect("resample");
    assert!(lg.magnitude.data().iter().all(|&v| v == c), "constant spectrum altered");

    // Ground-truth ratio masks separate the corpus duets well.
    let mut nsdrs = Vec::new();
    for rec in &duets {
        let refs = DATA.references(rec).expect("refs");
        let mixture = DATA.waveform(rec).expect("mixture");
        let (mix_log, mix_spec) = log_of(&mixture);
        let (la, _) = log_of(&refs[0]);
        let (lb, _) = log_of(&refs[1]);
        let (m1, m2) = dsp::ratio_masks(&la, &lb).expect("masks");
        let views: Vec<&[f64]> = refs.iter().map(|r| r.samples()).collect();
        for (mask, target) in [(&m1, 0usize), (&m2, 1usize)] {
            let est = dsp::apply_mask(mask, &mix_log, &mix_spec).expect("estimate");
            nsdrs.push(
                nsdr(est.samples(), mixture.samples(), &views, target, TOY_FILTER_TAPS)
                    .expect("nsdr"),
            );
        }
    }
    let mean = nsdrs.iter().sum::<f64>() / nsdrs.len() as f64;
    assert!(
        mean >= ORACLE_MASK_MIN_NSDR_DB,
        "oracle-mask mean NSDR {mean:.2} dB < {ORACLE_MASK_MIN_NSDR_DB} dB"
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs <= DSP_MAX_SECS, "dsp identities took {secs:.1}s");
    println!(
        "criterion 2: PASS — masks sum to 1±{MASK_SUM_TOL:.0e} on {live_cells} cells, \
         min interior SNR {min_snr:.0} dB, constant resample exact, oracle NSDR {mean:.2} dB \
         over {} estimates in {secs:.1}s",
        nsdrs.len()
    );
}

// ---------------------------------------------------------------------------
// 3. Separation metrics agree with a dense least-squares oracle.
// ---------------------------------------------------------------------------

/// Projection decomposition built from explicit shifted-reference columns
/// and a dense LU normal-equation solve.
fn dense_oracle(
    estimate: &[f64],
    refs: &[&[f64]],
    target: usize,
    taps: usize,
) -> BssDecomposition {
    let len = estimate.len();
    let padded = len + taps - 1;
    let columns = |use_refs: &[&[f64]]| -> Vec<Vec<f64>> {
        let mut cols = Vec::new();
        for r in use_refs {
            for a in 0..taps {
                let mut c = vec![0.0; padded];
                for (u, &v) in r.iter().enumerate() {
                    c[u + a] = v;
                }
                cols.push(c);
            }
        }
        cols
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let project = |cols: &[Vec<f64>]| -> Vec<f64> {
        let m = cols.len();
        let mut gram = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                gram[i * m + j] = dot(&cols[i], &cols[j]);
            }
            gram[i * m + i] += BSS_JITTER;
        }
        let rhs: Vec<f64> = cols.iter().map(|c| dot(&c[..len], estimate)).collect();
        let coef = linalg::lu_solve(&gram, m, &rhs).expect("dense solve");
        let mut out = vec![0.0; padded];
        for (c, col) in coef.iter().zip(cols) {
            for (o, v) in out.iter_mut().zip(col) {
                *o += c * v;
            }
        }
        out
    };
    let s_target = project(&columns(&[refs[target]]));
    let p_all = project(&columns(refs));
    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let e_artif: Vec<f64> = (0..padded)
        .map(|t| if t < len { estimate[t] } else { 0.0 } - p_all[t])
        .collect();
    BssDecomposition { s_target, e_interf, e_artif, filter_taps: taps }
}

#[test]
fn criterion_3_bss_matches_dense_oracle() {
    let mut worst = 0.0_f64;
    let mut worst_scale = 0.0_f64;
    for case in 0..20u64 {
        let mut rng = util::rng_from_seed(7000 + case);
        let len = 64;
        let taps = 1 + (case as usize % 8);
        let n_refs = 2 + (case as usize % 2);
        let refs: Vec<Vec<f64>> =
            (0..n_refs).map(|_| util::gaussian_vec(&mut rng, len, 1.0)).collect();
        let views: Vec<&[f64]> = refs.iter().map(|r| r.as_slice()).collect();
        let est = util::gaussian_vec(&mut rng, len, 1.0);
        let target = case as usize % n_refs;

        let fast = bss_decompose(&est, &views, target, taps).expect("decomposition");
        let slow = dense_oracle(&est, &views, target, taps);
        for (a, b) in [
            (&fast.s_target, &slow.s_target),
            (&fast.e_interf, &slow.e_interf),
            (&fast.e_artif, &slow.e_artif),
        ] {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }

        let scaled: Vec<f64> = est.iter().map(|v| v * 3.7).collect();
        let s0 = sdr(&fast).expect("sdr");
        let s1 = sdr(&bss_decompose(&scaled, &views, target, taps).expect("scaled")).expect("sdr");
        worst_scale = worst_scale.max((s0 - s1).abs());
    }
    assert!(worst <= BSS_ORACLE_TOL, "oracle deviation {worst:.3e} > {BSS_ORACLE_TOL:.0e}");
    assert!(
        worst_scale <= SDR_SCALE_TOL_DB,
        "scale dependence {worst_scale:.3e} dB > {SDR_SCALE_TOL_DB:.0e} dB"
    );

    // An unprocessed mixture improves over itself by exactly zero.
    let mut examples = 0;
    for rec in DATA.records(Split::Test) {
        let mixture = DATA.waveform(rec).expect("mixture");
        let refs = DATA.references(rec).expect("refs");
        let views: Vec<&[f64]> = refs.iter().map(|r| r.samples()).collect();
        for target in 0..views.len() {
            let v = nsdr(mixture.samples(), mixture.samples(), &views, target, TOY_FILTER_TAPS)
                .expect("nsdr");
            assert_eq!(v, 0.0, "nsdr(mixture) != 0 on {} target {target}", rec.id);
            examples += 1;
        }
    }
    println!(
        "criterion 3: PASS — 20 dense-oracle cases within {BSS_ORACLE_TOL:.0e} \
         (worst {worst:.2e}), scale shift ≤ {SDR_SCALE_TOL_DB:.0e} dB \
         (worst {worst_scale:.2e}), nsdr(mixture)=0 exactly on {examples} targets"
    );
}

// ---------------------------------------------------------------------------
// 4. Latent-caption inversion reaches the analytic projection optimum.
// ---------------------------------------------------------------------------

/// Best achievable cosine between the pooled embedding and any encodable
/// caption: the norm fraction of the embedding inside the text-map range.
fn projection_optimum(space: &ConceptSpace, pooled: &[f64]) -> f64 {
    let d = space.config().d;
    let d_tok = space.config().d_tok;
    let tm = space.text_map_array();
    // Columns of the D × D_tok map, laid out as rows for the basis helper.
    let mut cols = vec![0.0; d_tok * d];
    for r in 0..d {
        for c in 0..d_tok {
            cols[c * d + r] = tm.data()[r * d_tok + c];
        }
    }
    let basis = linalg::orthonormal_basis(&cols, d_tok, d).expect("text-map basis");
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut inside = 0.0;
    for b in &basis {
        let coef: f64 = b.iter().zip(pooled).map(|(x, y)| x * y).sum();
        inside += coef * coef;
    }
    inside.sqrt() / norm
}

#[test]
fn criterion_4_inversion_hits_projection_optimum() {
    let t0 = Instant::now();
    let space = DATA.space();
    let solos = DATA.solos(Split::Test);
    assert_eq!(solos.len(), 20, "expected the default test-solo count");
    let mut ratios = Vec::new();
    for (i, rec) in solos.iter().enumerate() {
        let raw = DATA.grid(rec).expect("grid");
        let cap = extract_latent_caption(space, &raw, 3, 5000, 0.05, 31_000 + i as u64)
            .expect("inversion");
        assert!(
            cap.fit_trace.windows(2).all(|w| w[1] >= w[0]),
            "best-so-far fit regressed on {}",
            rec.id
        );

        let lifted = space.lift_regions(&raw).expect("lift");
        let center = raw.t / 2;
        let frame_len = raw.h * raw.w * space.config().d;
        let pooled = attention_pool(
            space.pool_params(),
            &lifted[center * frame_len..(center + 1) * frame_len],
        )
        .expect("pool");
        let opt = projection_optimum(space, &pooled);
        assert!(opt > 0.0, "degenerate optimum on {}", rec.id);
        let ratio = cap.fit / opt;
        assert!(
            ratio >= INVERSION_OPTIMALITY,
            "{}: fit {:.6} vs optimum {:.6} (ratio {:.6})",
            rec.id,
            cap.fit,
            opt,
            ratio
        );
        ratios.push(ratio);
    }
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs <= INVERSION_MAX_SECS, "inversion suite took {secs:.1}s");
    println!(
        "criterion 4: PASS — 20 inversions monotone, worst fit/optimum {worst:.5} \
         ≥ {INVERSION_OPTIMALITY} in {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// 5. Alignment training makes language-queried separation work.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_language_query_training_lift() {
    let t0 = Instant::now();
    let full = &TRAINED["full"];
    let none = &TRAINED["none"];
    let full_al = al_mean(full);
    let none_al = al_mean(none);
    let eval_secs = t0.elapsed().as_secs_f64();
    println!(
        "criterion 5: measured — full {full_al:.2} dB, none {none_al:.2} dB, \
         train {:.0}s + {:.0}s, eval {eval_secs:.0}s",
        full.train_secs, none.train_secs
    );

    // The separator itself must have learned: the mask objective late in
    // the full run sits well below its early value.
    let log = fs::read_to_string(full.dir.join("loss_log.csv")).expect("loss log");
    let mask_at = |step: u64| -> f64 {
        log.lines()
            .skip(1)
            .map(|l| {
                let mut it = l.split(',');
                let s: u64 = it.next().unwrap().parse().unwrap();
                let m: f64 = it.next().unwrap().parse().unwrap();
                (s, m)
            })
            .find(|(s, _)| *s == step)
            .unwrap_or_else(|| panic!("step {step} missing from loss log"))
            .1
    };
    let early = mask_at(10);
    let late = mask_at(full.cfg.total_steps);
    assert!(
        late < MASK_CURVE_RATIO * early,
        "mask objective did not halve: step 10 {early:.4e} -> final {late:.4e}"
    );

    assert!(
        none_al <= AL_BASELINE_MAX_DB,
        "no-alignment language NSDR {none_al:.2} dB should not beat the mixture"
    );
    let lift = full_al - none_al;
    assert!(
        lift >= AL_LIFT_MIN_DB,
        "alignment lift {lift:.2} dB < {AL_LIFT_MIN_DB} dB (full {full_al:.2}, none {none_al:.2})"
    );

    let budget_secs = full.train_secs + none.train_secs + eval_secs;
    assert!(budget_secs <= AL_MAX_SECS, "language-lift path took {budget_secs:.0}s");
    println!(
        "criterion 5: PASS — language NSDR full {full_al:.2} dB vs none {none_al:.2} dB \
         (lift {lift:.2} ≥ {AL_LIFT_MIN_DB} dB, baseline ≤ {AL_BASELINE_MAX_DB} dB), \
         mask loss {early:.3e}→{late:.3e}, {budget_secs:.0}s of a {AL_MAX_SECS:.0}s budget"
    );
}

// ---------------------------------------------------------------------------
// 6. Region-level queries beat pooled queries on multi-object videos.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_region_mil_beats_pooled_on_duets() {
    let region = duet_side_mean(&av_rows(&TRAINED["full"]));
    let pooled = duet_side_mean(&av_rows(&TRAINED["pooled"]));
    let lift = region - pooled;
    assert!(
        lift >= MIL_LIFT_MIN_DB,
        "region-query lift {lift:.2} dB < {MIL_LIFT_MIN_DB} dB \
         (region {region:.2}, pooled {pooled:.2})"
    );
    println!(
        "criterion 6: PASS — duet-video NSDR region {region:.2} dB vs pooled {pooled:.2} dB \
         (lift {lift:.2} ≥ {MIL_LIFT_MIN_DB} dB)"
    );
}

// ---------------------------------------------------------------------------
// 7. Each alignment objective helps on its own; both together stay near the
//    better single objective.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_alignment_ablation_directions() {
    let mean_of = |name: &str| mean_nsdr(&av_rows(&TRAINED[name])).expect("rows");
    let none = mean_of("none");
    let al = mean_of("al-only");
    let tri = mean_of("tri-only");
    let full = mean_of("full");
    assert!(al > none, "contrastive alone did not help: {al:.2} vs {none:.2} dB");
    assert!(tri > none, "attention consistency alone did not help: {tri:.2} vs {none:.2} dB");
    let best_single = al.max(tri);
    assert!(
        full >= best_single - ABLATION_SLACK_DB,
        "both objectives {full:.2} dB fell more than {ABLATION_SLACK_DB} dB below \
         the best single {best_single:.2} dB"
    );
    println!(
        "criterion 7: PASS — video-query NSDR none {none:.2} < single ({al:.2} / {tri:.2}) \
         and full {full:.2} ≥ {best_single:.2} − {ABLATION_SLACK_DB} dB"
    );
}

// ---------------------------------------------------------------------------
// 8. Bit-level determinism and a frozen embedding model.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism_and_frozen_foundation() {
    let space = DATA.space();
    let before_concepts: Vec<Vec<f64>> =
        (0..space.n_concepts()).map(|k| space.concept(k).to_vec()).collect();
    let before_text_map = space.text_map_array();

    let cfg = {
        let mut c = TrainConfig::default();
        c.total_steps = 8;
        c.warmup_steps = 2;
        c.inversion_iters = 60;
        c.n_tokens = 2;
        c.seed = 2718;
        c
    };
    let dir_a = cache_root().join("determinism-a");
    let dir_b = cache_root().join("determinism-b");
    for d in [&dir_a, &dir_b] {
        if d.exists() {
            fs::remove_dir_all(d).expect("clear determinism dir");
        }
    }
    train(&DATA, &cfg, &dir_a, None, false).expect("run a");
    train(&DATA, &cfg, &dir_b, None, false).expect("run b");
    let bytes_a = fs::read(dir_a.join("checkpoint.bin")).expect("checkpoint a");
    let bytes_b = fs::read(dir_b.join("checkpoint.bin")).expect("checkpoint b");
    assert_eq!(bytes_a, bytes_b, "identical (config, seed) runs diverged");

    let ckpt = load_checkpoint(&dir_a.join("checkpoint.bin")).expect("reload");
    let resaved = dir_a.join("resaved.bin");
    save_checkpoint(&ckpt, &resaved).expect("resave");
    assert_eq!(bytes_a, fs::read(&resaved).expect("resaved bytes"), "round trip not bit-exact");
    let reloaded = load_checkpoint(&resaved).expect("second load");
    for (name, arr) in &ckpt.params {
        let again = &reloaded.params[name];
        assert_eq!(arr.shape(), again.shape());
        for (x, y) in arr.data().iter().zip(again.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "param {name} drifted");
        }
    }

    // The embedding model the runs consumed is untouched, bit for bit.
    for (k, before) in before_concepts.iter().enumerate() {
        let after = space.concept(k);
        assert_eq!(before.len(), after.len());
        for (x, y) in before.iter().zip(after) {
            assert_eq!(x.to_bits(), y.to_bits(), "concept {k} drifted");
        }
    }
    let after_text_map = space.text_map_array();
    for (x, y) in before_text_map.data().iter().zip(after_text_map.data()) {
        assert_eq!(x.to_bits(), y.to_bits(), "text map drifted");
    }
    // And it is exactly reproducible from its recorded config and seed.
    let regen = ConceptSpace::generate(DATA.config().space, DATA.config().space_seed)
        .expect("regenerate space");
    for k in 0..space.n_concepts() {
        for (x, y) in space.concept(k).iter().zip(regen.concept(k)) {
            assert_eq!(x.to_bits(), y.to_bits(), "regenerated concept {k} differs");
        }
    }
    println!(
        "criterion 8: PASS — byte-identical checkpoints ({} bytes), bit-exact round trip, \
         frozen embedding model delta exactly zero",
        bytes_a.len()
    );
}
