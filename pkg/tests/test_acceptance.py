"""End-to-end acceptance suite.

Each test covers one acceptance criterion and prints a single
``criterion N (...): PASS`` / ``FAIL`` line directly to the terminal.
Criteria 5 and 6 train real models on the synthetic audio-video dataset and
take the bulk of the runtime (tens of minutes on a desktop CPU).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from avseg.audio import compute_spectrogram, slice_per_frame
from avseg.cli import main as cli_main
from avseg.crossover import FramePair, crossover_masks, dice_loss, within_frame_masks
from avseg.data import AudioTrack, SyntheticSceneConfig, generate_clip
from avseg.evaluate import classification_accuracy, compute_ap
from avseg.infer import gt_tracks_from_clip, predict_clip
from avseg.model import (
    AVSegModel,
    ModelConfig,
    load_checkpoint,
    make_coordinate_map,
    mask_head,
    mask_head_param_count,
    unpack_filters,
)
from avseg.train import TrainConfig, evaluate_mask_dice, fit, lr_at, read_loss_log

REPO_ROOT = Path(__file__).resolve().parents[1]

# Pinned recipe for the comparative experiments (criteria 5 and 6): two of the
# four classes are visually identical and differ only by their emitted tone,
# and those two never co-occur, so audio disambiguates them globally.
DATA_CFG = SyntheticSceneConfig(seed=1, exclusive_groups=[(0, 1)])
N_TRAIN, N_VAL = 200, 40
CONFUSABLE = {0, 1}
RECIPE = dict(epochs=60, lr_milestones=[45, 54], base_lr=0.002,
              warmup_iters=300, batch_clips=8)
RUN_BUDGET_S = 30 * 60


def _report(capsys, num, name, fn):
    try:
        fn()
    except BaseException:
        with capsys.disabled():
            print(f"criterion {num:2d} ({name}): FAIL", flush=True)
        raise
    with capsys.disabled():
        print(f"criterion {num:2d} ({name}): PASS", flush=True)


@pytest.fixture(scope="module")
def corpus():
    train = [generate_clip(DATA_CFG, i) for i in range(N_TRAIN)]
    val = [generate_clip(DATA_CFG, 100_000 + i) for i in range(N_VAL)]
    return train, val


@pytest.fixture(scope="module")
def run_cache(corpus, tmp_path_factory):
    """Trains one model per requested (seed, audio, crossover) combination and
    caches AP@0.5, confusable-pair accuracy, held-out mask dice loss and wall
    time so criteria 5 and 6 can share runs."""
    train, val = corpus
    root = tmp_path_factory.mktemp("runs")
    cache = {}

    def get(seed, audio=True, crossover=True):
        key = (seed, audio, crossover)
        if key in cache:
            return cache[key]
        cfg = TrainConfig(seed=seed, audio_enabled=audio,
                          crossover_enabled=crossover, **RECIPE)
        t0 = time.monotonic()
        ckpt, _ = fit(train, cfg, ModelConfig(),
                      root / f"s{seed}_a{int(audio)}_x{int(crossover)}")
        elapsed = time.monotonic() - t0
        model, _ = load_checkpoint(ckpt)
        preds = [predict_clip(model, c, audio_enabled=audio) for c in val]
        gts = [gt_tracks_from_clip(c) for c in val]
        cache[key] = {
            "ap50": compute_ap(preds, gts, thresholds=[0.5]).ap,
            "acc": classification_accuracy(preds, gts, classes=CONFUSABLE),
            "dice_loss": evaluate_mask_dice(model, val, audio_enabled=audio),
            "train_seconds": elapsed,
        }
        return cache[key]

    return get


def test_criterion_1_scale_limits_stated(capsys):
    def check():
        readme = (REPO_ROOT / "README.md").read_text().lower()
        assert "not reproduced" in readme
        assert "property-based" in readme
    _report(capsys, 1, "benchmark-scale results declared out of scope", check)


def test_criterion_2_dice_loss_suite(capsys):
    def check():
        t0 = time.monotonic()
        m = torch.rand(8, 8)
        assert float(dice_loss(m, m)) == pytest.approx(0.0, abs=1e-5)
        a = torch.zeros(4, 4); a[0, 0] = 1
        b = torch.zeros(4, 4); b[3, 3] = 1
        assert float(dice_loss(a, b)) == pytest.approx(1.0, abs=1e-5)
        assert float(dice_loss(torch.tensor([1.0, 1.0, 0.0, 0.0]),
                               torch.tensor([1.0, 0.0, 1.0, 0.0]))) == pytest.approx(0.5, abs=1e-5)
        gen = torch.Generator().manual_seed(0)
        for _ in range(10):
            p, q = torch.rand(8, 8, generator=gen), torch.rand(8, 8, generator=gen)
            pq = float(dice_loss(p, q))
            assert pq == pytest.approx(float(dice_loss(q, p)), abs=1e-7)
            assert 0.0 <= pq <= 1.0
        rng = np.random.default_rng(2)
        eps = 1e-6
        for _ in range(20):
            m_np = rng.uniform(0.05, 0.95, (8, 8))
            t_np = (rng.random((8, 8)) > 0.5).astype(float)
            mt = torch.tensor(m_np, requires_grad=True)
            tt = torch.tensor(t_np)
            dice_loss(mt, tt).backward()
            for _ in range(3):
                i, j = rng.integers(0, 8, 2)
                mp = torch.tensor(m_np); mp[i, j] += eps
                mm = torch.tensor(m_np); mm[i, j] -= eps
                fd = float((dice_loss(mp, tt) - dice_loss(mm, tt)) / (2 * eps))
                an = float(mt.grad[i, j])
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-4) < 1e-3
        assert time.monotonic() - t0 < 10
    _report(capsys, 2, "dice loss properties and gradients", check)


def test_criterion_3_mask_head_oracle(capsys):
    def pixelwise(f_tilde, theta, c_m):
        layers = [(w[:, :, 0, 0].numpy(), b.numpy())
                  for w, b in unpack_filters(theta, c_m)]
        h, w_ = f_tilde.shape[1:]
        out = np.zeros((h, w_))
        for y in range(h):
            for x in range(w_):
                v = f_tilde[:, y, x].numpy()
                for i, (wm, bv) in enumerate(layers):
                    v = wm @ v + bv
                    if i < len(layers) - 1:
                        v = np.maximum(v, 0)
                out[y, x] = v[0]
        return out

    def check():
        t0 = time.monotonic()
        c_m = 8
        assert mask_head_param_count(c_m) == 169
        gen = torch.Generator().manual_seed(5)
        for _ in range(10):
            f_tilde = torch.randn(c_m + 2, 12, 12, generator=gen, dtype=torch.float64)
            theta = torch.randn(169, generator=gen, dtype=torch.float64)
            got = mask_head(f_tilde, theta).numpy()
            want = pixelwise(f_tilde, theta, c_m)
            assert np.abs(got - want).max() < 1e-5
        assert time.monotonic() - t0 < 10
    _report(capsys, 3, "dynamic mask head matches per-pixel oracle", check)


def test_criterion_4_crossover_degeneracy(capsys):
    def check():
        for seed in range(10):
            torch.manual_seed(seed)
            model = AVSegModel(ModelConfig())
            model.eval()
            with torch.no_grad():
                f = model(torch.rand(1, 3, 64, 64), None, audio_enabled=False)
            pair = FramePair(t=0, delta=0, correspondences=[((3, 4), (3, 4), 0)],
                             features_t=f, features_td=f)
            (_, m_t, m_td) = within_frame_masks(pair)[0]
            (_, m_star_td, m_star_t) = crossover_masks(pair)[0]
            assert torch.equal(m_star_td, m_td)
            assert torch.equal(m_star_t, m_t)
    _report(capsys, 4, "crossover collapses to within-frame at zero offset", check)


def test_criterion_5_audio_fusion_efficacy(capsys, run_cache):
    results = {}

    def check():
        assert N_TRAIN >= 200 and N_VAL >= 40
        passed = 0
        for seed in (0, 1, 2):
            full = run_cache(seed, audio=True)
            blind = run_cache(seed, audio=False)
            assert full["train_seconds"] < RUN_BUDGET_S
            assert blind["train_seconds"] < RUN_BUDGET_S
            ok = (full["ap50"] - blind["ap50"] >= 0.15
                  and blind["acc"] <= 0.65 and full["acc"] >= 0.85)
            results[seed] = {"full": full, "no_audio": blind, "pass": ok}
            passed += ok
            if passed >= 2:
                break
        assert passed >= 2, f"only {passed}/3 seeds passed: {results}"

    try:
        _report(capsys, 5, "audio fusion resolves visually identical classes", check)
    finally:
        with capsys.disabled():
            for seed, r in results.items():
                print(f"  seed {seed}: full ap50={r['full']['ap50']:.3f} "
                      f"acc={r['full']['acc']:.3f} | no-audio "
                      f"ap50={r['no_audio']['ap50']:.3f} acc={r['no_audio']['acc']:.3f}"
                      f" -> {'pass' if r['pass'] else 'fail'}", flush=True)


def test_criterion_6_crossover_noninferiority(capsys, run_cache, tmp_path):
    def check():
        # identical seed and budget; dice loss (lower is better) may exceed the
        # no-crossover run by at most 0.02
        full = run_cache(0, crossover=True)
        nox = run_cache(0, crossover=False)
        assert full["dice_loss"] <= nox["dice_loss"] + 0.02, (full, nox)

        # the ablate command renders all three variant rows (small budget)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("data.exclusive_groups = [[0, 1]]\n"
                       "train.epochs = 1\ntrain.lr_milestones = []\n"
                       "train.warmup_iters = 2\ntrain.batch_clips = 2\n")
        data = tmp_path / "data"
        assert cli_main(["generate", "--config", str(cfg), "--out", str(data),
                         "--clips", "2", "--val-clips", "1"]) == 0
        out = tmp_path / "ablation"
        assert cli_main(["ablate", "--config", str(cfg), "--dataset", str(data),
                         "--out", str(out)]) == 0
        rows = json.loads((out / "report.json").read_text())
        ok = {r["variant"] for r in rows if r.get("status") == "ok"}
        assert ok == {"full", "no-crossover", "no-audio"}
    _report(capsys, 6, "crossover non-inferior and ablation report complete", check)


def test_criterion_7_spectrogram_pipeline(capsys):
    def check():
        t0 = time.monotonic()
        rng = np.random.default_rng(7)
        # framing count over random (N, window, hop) triples
        for _ in range(50):
            window = int(rng.integers(2, 64)) * 2
            hop = int(rng.integers(1, window + 1))
            n = int(rng.integers(window, window * 20))
            spec = compute_spectrogram(
                AudioTrack(rng.uniform(-1, 1, (1, n)), 8000), window=window, hop=hop)
            assert spec.num_columns == 1 + (n - window) // hop
        # per-frame slices concatenate back to the full spectrogram
        spec = compute_spectrogram(AudioTrack(rng.uniform(-1, 1, (1, 8000)), 8000))
        for num_frames in (1, 3, 4, 7):
            slices = slice_per_frame(spec, num_frames)
            recon = np.concatenate([s.magnitudes for s in slices], axis=1)
            assert np.array_equal(recon, spec.magnitudes)
        # spectral peak agrees with an independent windowed DFT within one bin
        sr, n = 8000, 8192
        t = np.arange(n) / sr
        for freq in (300, 500, 900, 1400, 2200):
            sig = np.sin(2 * np.pi * freq * t)
            spec = compute_spectrogram(AudioTrack(sig[None, :], sr))
            got_bin = int(np.argmax(spec.magnitudes.mean(axis=1)))
            frame = sig[:1024] * np.hanning(1024)
            want_bin = int(np.argmax(np.abs(np.fft.rfft(frame))))
            assert abs(got_bin - want_bin) <= 1, freq
        assert time.monotonic() - t0 < 10
    _report(capsys, 7, "spectrogram framing, slicing and DFT peak agreement", check)


def test_criterion_8_ap_oracle(capsys):
    from test_evaluate import blob, brute_force_ap, track

    def check():
        t0 = time.monotonic()
        gt = [[track(0, {0: blob(8, 8, 0, 0, 4)}), track(1, {0: blob(8, 8, 4, 4, 3)})]]
        perfect = [[track(0, {0: blob(8, 8, 0, 0, 4)}, score=0.9),
                    track(1, {0: blob(8, 8, 4, 4, 3)}, score=0.8)]]
        r = compute_ap(perfect, gt)
        assert r.ap == pytest.approx(1.0) and r.ar == pytest.approx(1.0)

        g, wrong = blob(8, 8, 0, 0, 4), blob(8, 8, 4, 4, 3)
        swapped = [[track(0, {0: g}, score=0.5, track_id=0),
                    track(0, {0: wrong}, score=0.9, track_id=1)]]
        assert compute_ap(swapped, [[track(0, {0: g})]],
                          thresholds=[0.5]).ap == pytest.approx(0.5, abs=0.01)

        rng = np.random.default_rng(42)
        checked = 0
        while checked < 20:
            n_videos = int(rng.integers(1, 3))
            gts = [[track(0, {0: blob(16, 16, *rng.integers(0, 10, 2), 6)}, track_id=k)
                    for k in range(int(rng.integers(0, 4)))] for _ in range(n_videos)]
            preds = [[track(0, {0: blob(16, 16, *rng.integers(0, 10, 2), 6)},
                            score=float(rng.random()), track_id=10 + k)
                      for k in range(int(rng.integers(0, 4)))] for _ in range(n_videos)]
            flat_p = [(v, p) for v in range(n_videos) for p in preds[v]]
            flat_g = [(v, g_) for v in range(n_videos) for g_ in gts[v]]
            if not flat_g and not flat_p:
                continue
            got = compute_ap(preds, gts, thresholds=[0.5]).ap
            assert got == pytest.approx(brute_force_ap(flat_p, flat_g, 0.5), abs=1e-9)
            checked += 1
        assert time.monotonic() - t0 < 30
    _report(capsys, 8, "video AP matches exhaustive matching oracle", check)


def test_criterion_9_lr_schedule(capsys):
    def check():
        cfg = TrainConfig()
        ipe = 1000
        assert lr_at(cfg.warmup_iters, ipe, cfg) == pytest.approx(0.005)
        assert lr_at(9 * ipe, ipe, cfg) == pytest.approx(0.0005)
        assert lr_at(11 * ipe, ipe, cfg) == pytest.approx(0.00005)
        values = [lr_at(i, 100, cfg) for i in range(cfg.warmup_iters, 12 * 100)]
        assert all(a >= b for a, b in zip(values, values[1:]))
    _report(capsys, 9, "learning-rate schedule values and monotonicity", check)


def test_criterion_10_overfit_smoke(capsys, tmp_path):
    def check():
        t0 = time.monotonic()
        clips = [generate_clip(DATA_CFG, i) for i in range(2)]
        cfg = TrainConfig(epochs=500, lr_milestones=[], base_lr=0.002,
                          warmup_iters=100, batch_clips=2, seed=0)
        ckpt, log = fit(clips, cfg, ModelConfig(), tmp_path / "overfit")
        reports = read_loss_log(log)
        assert len(reports) == 500
        assert reports[-1].total < reports[0].total
        model, _ = load_checkpoint(ckpt)
        dice = evaluate_mask_dice(model, clips)
        assert dice < 0.2, dice
        assert time.monotonic() - t0 < 300
    _report(capsys, 10, "two-clip overfit reaches low mask dice loss", check)


def test_criterion_11_determinism(capsys, tmp_path):
    def check():
        clips = [generate_clip(DATA_CFG, i) for i in range(4)]
        cfg = TrainConfig(epochs=2, lr_milestones=[1], warmup_iters=2,
                          batch_clips=2, seed=5)
        fit(clips, cfg, ModelConfig(), tmp_path / "a")
        fit(clips, cfg, ModelConfig(), tmp_path / "b")
        assert (tmp_path / "a" / "loss_log.jsonl").read_text() == \
               (tmp_path / "b" / "loss_log.jsonl").read_text()
    _report(capsys, 11, "identical seed and config give identical loss logs", check)
