"""Acceptance suite: nine end-to-end criteria, each reporting one PASS/FAIL line.

The phantom benchmark (criteria 5, 6, 7 and 9) trains a UNet-XS velocity
model once per module on autoencoder latents of 64x64 phantoms and reuses it.
Expect the whole module to take roughly 25 minutes on one CPU core, most of
it training the benchmark model.
"""

import json
import time
import zlib

import numpy as np
import pytest
from scipy import stats

import gradcheck as gc
import metric_oracle as mo
from acceptance_log import report
from rectiflow.cli import main
from rectiflow.corruption import CorruptionConfig, make_pairs
from rectiflow.flow import FixedPairs, TrainConfig, euler_solve, rf_loss, straightness, train, velocity_fn
from rectiflow.nets import MlpVelocity, UNetVelocity
from rectiflow.persist import CheckpointIntegrityError, CheckpointVersionError, export_dataset, load_flow, save_flow
from rectiflow.phantom import gen_vector_task, make_lesion_cases
from rectiflow.pipeline import encode_set, phantom_arrays, reflow_flow, texture_bank, train_flow
from rectiflow.scoring import evaluate_dataset, max_dice

# Benchmark training settings. Corruption, model preset and codec are defaults.
BENCH_NORMALS = 2000
BENCH_TRAIN = TrainConfig(epochs=150, batch_size=32, lr=3e-3, schedule="cosine", seed=0)
BENCH_CASES = 200
HELD_OUT_SEED = 4242


# -- 1: gradients --------------------------------------------------------------------


def test_gradients_match_finite_differences():
    start = time.perf_counter()
    worst = {}
    for kind, make in sorted(gc.OP_CASES.items()):
        rng = np.random.default_rng(zlib.crc32(b"acceptance-" + kind.encode()))
        worst[kind] = max(gc.check(*make(rng), rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < gc.REL_TOL and elapsed < 60
    report(1, "gradient correctness", ok, f"{len(worst)} ops x 20 instances, worst rel. error {err:.2e} ({name}), {elapsed:.1f}s")
    assert ok


# -- 2: zero-init anchor --------------------------------------------------------------


def test_zero_initialised_loss_equals_mean_squared_displacement():
    rng = np.random.default_rng(11)
    y1 = rng.standard_normal((32, 4, 16, 16)).astype(np.float32)
    y0, _ = make_pairs(y1, CorruptionConfig(strategy_weights=(1.0, 0.0)), rng)
    loss = rf_loss(UNetVelocity.from_preset("XS", channels=4, seed=0), y0, y1, rng.uniform(size=32)).item()
    d = y1.astype(np.float64) - y0
    expected = float(np.mean(np.sum(d * d, axis=(1, 2, 3))))
    rel = abs(loss - expected) / expected
    # float32 accumulation: the tolerance is applied relative to the loss value
    ok = rel <= 1e-6
    report(2, "zero-init anchor", ok, f"loss {loss:.6f} vs E|y1-y0|^2 {expected:.6f}, rel. diff {rel:.1e}")
    assert ok


# -- 3: distribution preservation ------------------------------------------------------


def test_corrupted_entries_are_standard_normal():
    rng = np.random.default_rng(12)
    n = 10_000
    y1 = rng.standard_normal((n, 4, 16, 16)).astype(np.float32)
    y0, masks = make_pairs(y1, CorruptionConfig(strategy_weights=(1.0, 0.0)), rng)
    # one masked entry per image keeps the 10^4 samples independent
    samples = np.empty(n)
    for i in range(n):
        cells = np.argwhere(masks[i])
        r, c = cells[rng.integers(len(cells))]
        samples[i] = y0[i, rng.integers(4), r, c]
    p = stats.kstest(samples, "norm").pvalue
    mean, var = samples.mean(), samples.var()
    ok = p > 0.01 and abs(mean) <= 0.02 and abs(var - 1) <= 0.03
    report(3, "distribution preservation", ok, f"KS p={p:.3f}, mean {mean:+.4f}, var {var:.4f} over {n} masked entries")
    assert ok


# -- 4: constant-velocity closed form ----------------------------------------------------


def test_offset_task_learns_the_constant_velocity():
    x0, x1 = gen_vector_task("gaussian-offset", 4000, seed=0)
    flow = train(MlpVelocity(2, seed=0), FixedPairs(x0, x1), TrainConfig(epochs=200, lr=1e-3, batch_size=128))
    h0, h1 = gen_vector_task("gaussian-offset", 1000, seed=1)
    offset = np.array([2.0, -1.0])
    v = velocity_fn(flow)
    vel_err = max(float(np.abs(v(h0 - t * offset, t) - offset).max()) for t in np.linspace(0, 1, 5))
    rec, _ = euler_solve(flow, h0, 1)
    rec_err = float(np.abs(rec - h1).max())
    ok = vel_err < 0.05 and rec_err < 0.05
    report(4, "constant-velocity closed form", ok, f"max |v - c| {vel_err:.4f}, max single-step recovery error {rec_err:.4f}")
    assert ok


# -- phantom benchmark ----------------------------------------------------------------


@pytest.fixture(scope="module")
def bench(phantom_codec):
    codec = phantom_codec
    images, fgs = phantom_arrays(BENCH_NORMALS, seed=1)
    data = encode_set(codec, images, fgs)
    bank = texture_bank(codec, 32, 64, seed=5)
    start = time.perf_counter()
    flow = train_flow(data, CorruptionConfig(), BENCH_TRAIN, bank, "XS")
    train_time = time.perf_counter() - start
    return {"codec": codec, "data": data, "bank": bank, "flow": flow, "train_time": train_time}


@pytest.fixture(scope="module")
def held_out(bench):
    """Encoded normals never used for training, plus corrupted copies."""
    images, fgs = phantom_arrays(64, seed=HELD_OUT_SEED)
    data = encode_set(bench["codec"], images, fgs)
    y0, masks = make_pairs(data.latents, CorruptionConfig(), np.random.default_rng(HELD_OUT_SEED), data.latent_fg, bench["bank"])
    return data.latents, y0, masks


@pytest.fixture(scope="module")
def student(bench):
    return reflow_flow(bench["flow"], bench["data"], CorruptionConfig(), BENCH_TRAIN, bench["bank"])


def _msd(a, b):
    return float(np.mean(np.sum((a.astype(np.float64) - b) ** 2, axis=(1, 2, 3))))


def test_single_step_adequacy_and_reflow_straightening(bench, held_out, student):
    flow = bench["flow"]
    _, y0, _ = held_out
    one, _ = euler_solve(flow, y0, 1)
    ten, _ = euler_solve(flow, y0, 10)
    gap = _msd(one, ten)
    magnitude = _msd(ten, y0)
    s1, s2 = straightness(flow, y0, 10), straightness(student, y0, 10)
    ok = gap < 0.1 * magnitude and s2 <= s1 + 1e-3
    report(
        5,
        "straightness and single-step adequacy",
        ok,
        f"1-vs-10-step msd {gap:.4f} vs 10% of correction {0.1 * magnitude:.4f}; straightness 1-reflect {s1:.5f}, 2-reflect {s2:.5f}",
    )
    assert ok


def test_phantom_benchmark_beats_untrained_baseline(bench):
    codec, flow = bench["codec"], bench["flow"]
    cases = make_lesion_cases(BENCH_CASES, seed=99)
    zero = UNetVelocity.from_preset("XS", channels=codec.latent_channels)
    base = evaluate_dataset(zero, codec, cases, steps=(1,)).summary()["1"]["mean_max_dice"]
    rep = evaluate_dataset(flow, codec, cases, steps=(1, 5))
    trained = rep.summary()["1"]["mean_max_dice"]
    hi = [r.max_dice for r in rep.reports[1] if r.severity >= 0.7 and r.kind in ("bright-blob", "dark-blob")]
    hi_mean = float(np.mean(hi))
    five = rep.summary()["5"]["mean_max_dice"]
    ok = trained >= base + 0.3 and hi_mean >= 0.5
    report(
        6,
        "phantom benchmark",
        ok,
        f"mean max-Dice {trained:.3f} vs zero-velocity baseline {base:.3f} (need +0.3); "
        f"high-severity blobs {hi_mean:.3f} over {len(hi)} cases; 5-step mean {five:.3f}; training {bench['train_time'] / 60:.1f} min",
    )
    assert ok


def test_transport_leaves_normal_latents_nearly_unchanged(bench, held_out):
    v = velocity_fn(bench["flow"])
    y1, y0, masks = held_out
    v1, v0 = v(y1, 0.0), v(y0, 0.0)
    normal = float(np.mean(np.sum(v1.astype(np.float64) ** 2, axis=(1, 2, 3)) / np.sum(y1.astype(np.float64) ** 2, axis=(1, 2, 3))))
    m = masks[:, None].astype(np.float64)
    keep = masks.any(axis=(1, 2))
    num = np.sum((v0 * m) ** 2, axis=(1, 2, 3))[keep]
    den = np.sum((y0 * m) ** 2, axis=(1, 2, 3))[keep]
    masked = float(np.mean(num / den))
    ok = normal <= 0.1 * masked
    report(7, "normality preservation", ok, f"normal ratio {normal:.4f} vs 0.1 x masked-region ratio {0.1 * masked:.4f}")
    assert ok


# -- 8: metric oracle -------------------------------------------------------------------


def test_max_dice_matches_brute_force_exactly():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        scores, gt = mo.random_instance(rng, quantized=True)
        mismatches += max_dice(scores, gt)[0] != mo.brute_force_max_dice(scores, gt)
    ok = mismatches == 0
    report(8, "metric oracle", ok, f"{mismatches} mismatches in 1000 quantised instances")
    assert ok


def test_reflow_student_single_step_tracks_teacher_multi_step(bench, held_out, student):
    _, y0, _ = held_out
    teacher_one, _ = euler_solve(bench["flow"], y0, 1)
    teacher_ten, _ = euler_solve(bench["flow"], y0, 10)
    student_one, _ = euler_solve(student, y0, 1)
    assert student.generation == "2-reflect" and student.teacher_id == bench["flow"].checkpoint_id()
    assert _msd(student_one, teacher_ten) < _msd(teacher_one, teacher_ten)


# -- 9: persistence -------------------------------------------------------------------


@pytest.fixture(scope="module")
def saved(bench, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "flow"
    save_flow(path, bench["flow"], bench["codec"])
    return path


def _corrupt_blob(src, dst):
    import shutil

    shutil.copytree(src, dst)
    blob = bytearray((dst / "tensors.bin").read_bytes())
    blob[len(blob) // 2] ^= 0x01
    (dst / "tensors.bin").write_bytes(bytes(blob))


def _bump_version(src, dst):
    import shutil

    shutil.copytree(src, dst)
    manifest = json.loads((dst / "manifest.json").read_text())
    manifest["format_version"] += 1
    (dst / "manifest.json").write_text(json.dumps(manifest))


def test_checkpoint_round_trip_reproduces_metrics(bench, saved, tmp_path):
    cases = make_lesion_cases(40, seed=7)
    before = evaluate_dataset(bench["flow"], bench["codec"], cases, steps=(1, 5), keep_maps=True)
    flow, codec = load_flow(saved)
    after = evaluate_dataset(flow, codec, cases, steps=(1, 5), keep_maps=True)
    identical = all(
        a.max_dice == b.max_dice and a.anomaly_map.tobytes() == b.anomaly_map.tobytes()
        for s in (1, 5)
        for a, b in zip(before.reports[s], after.reports[s])
    )
    _corrupt_blob(saved, tmp_path / "bad_blob")
    _bump_version(saved, tmp_path / "bad_version")
    errors = []
    for name, exc in (("bad_blob", CheckpointIntegrityError), ("bad_version", CheckpointVersionError)):
        try:
            load_flow(tmp_path / name)
            errors.append(f"{name}: loaded")
        except exc:
            pass
        except Exception as other:  # noqa: BLE001 - any other class is a failure
            errors.append(f"{name}: {type(other).__name__}")
    ok = identical and not errors
    report(9, "persistence", ok, f"metrics bit-identical after reload: {identical}; error classes: {errors or 'as designated'}")
    assert ok


# -- supplementary: command-line correction on a paired phantom -------------------------------


def test_correct_command_scores_lesioned_twin_higher(saved, tmp_path):
    twins = make_lesion_cases(4, seed=31, kinds=("bright-blob", "dark-blob"), severity_range=(0.8, 1.0))
    export_dataset(tmp_path / "clean", [c.phantom for c in twins])
    export_dataset(tmp_path / "lesion", twins)
    rows = {}
    for name in ("clean", "lesion"):
        assert main(["correct", "--checkpoint", str(saved), "--input", str(tmp_path / name / "images"), "--out", str(tmp_path / f"out_{name}")]) == 0
        lines = (tmp_path / f"out_{name}" / "maps.csv").read_text().splitlines()[1:]
        rows[name] = [float(line.split(",")[3]) for line in lines]
    assert all(les > cl for cl, les in zip(rows["clean"], rows["lesion"])), rows
