"""Acceptance criteria 1-12, each reported as one PASS/FAIL line.

The behavioural checks (5, 6, 7) train full-size models on the 4-modality
corpus, so this module takes most of an hour on one core.
"""

import csv
import time

import numpy as np
import pytest

from segmote import checkpoint as C
from segmote import experiments as X
from segmote import mote
from segmote import tensor as T
from segmote.config import TrainConfig
from segmote.data import in_memory_corpus
from segmote.decoder import TokenSequence, predict_mask
from segmote.encoder import init_frozen
from segmote.gradcheck import gradient_check
from segmote.losses import dice_loss
from segmote.model import make_batch
from segmote.tensor import Tensor
from segmote.train import evaluate, load_split, train

from conftest import tiny_config
from oracles import brute_route, direct_gates, random_case

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def corpus():
    return X.default_corpus()


@pytest.fixture(scope="module")
def runs_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="module")
def prompt_runs(corpus, runs_dir):
    """(PPT run, point/box baseline); the baseline is the default E=N=4, k=1 model."""
    return X.ppt_vs_point(corpus, out_dir=runs_dir)


@pytest.fixture(scope="module")
def balance_runs(corpus, runs_dir):
    return X.balance_effect(corpus, out_dir=runs_dir)


# -- 1-4: oracles -------------------------------------------------------------------

@pytest.mark.parametrize("label,cfg", [
    ("default", TrainConfig()),
    ("ppt+smooth_load", TrainConfig(ppt_enabled=True, smooth_load=True)),
])
def test_01_gradient_oracle(verdict, label, cfg):
    t0 = time.perf_counter()
    results = gradient_check(cfg)
    seconds = time.perf_counter() - t0
    checked = [r for r in results if r.error is not None]
    worst = max(checked, key=lambda r: r.error)
    # prompt-free PPT training feeds no prompt tokens, so their embeddings get no gradient
    may_skip = {"encoder"} | ({"prompt_encoder"} if cfg.ppt_enabled else set())
    skipped = {r.group for r in results if r.error is None}
    ok = worst.error < 1e-5 and seconds < 120 and skipped <= may_skip
    assert verdict(1, f"grad-check {label}: every group < 1e-5 in < 2 min", ok,
                   f"worst {worst.group} {worst.error:.2e}, {len(checked)} groups, {seconds:.1f}s")


def test_02_routing_oracle(verdict):
    rng = np.random.default_rng(2024)
    mismatches, worst_gate = 0, 0.0
    for _ in range(1000):
        logits, k = random_case(rng)
        scores, idx, conf, eidx = mote.route(Tensor(logits), k)
        _, winner = mote.token_weights(conf)
        bidx, bconf, bwin = brute_route(logits, k)
        same = (np.array_equal(idx, bidx) and np.array_equal(conf.data, bconf)
                and np.array_equal(eidx, bidx[..., 0]) and np.array_equal(winner, bwin))
        mismatches += not same
        gates = mote.dispatch_gates(scores, idx, logits.shape[-1]).data
        worst_gate = max(worst_gate, float(np.abs(gates - direct_gates(logits, bidx, logits.shape[-1])).max()))
    ok = mismatches == 0 and worst_gate <= 1e-6
    assert verdict(2, "route() equals full-sort oracle on 1000 tensors", ok,
                   f"{mismatches} mismatches, gate err {worst_gate:.1e}")


def test_03_cv_squared_oracles(verdict):
    uniform = mote.balance_loss(Tensor(np.full((3, 4, 4), 0.25))).balance_loss.item()
    # importance [1, 3]: one token on expert 0, three on expert 1; load forced to [1, 1]
    gates = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]))
    skewed = mote.balance_loss(gates, Tensor(np.array([1.0, 1.0]))).balance_loss.item()
    ok = abs(uniform) < 1e-12 and abs(skewed - 0.25) <= 1e-9
    assert verdict(3, "CV^2 oracles (uniform -> 0, [1,3]/[1,1] -> 0.25)", ok,
                   f"uniform {uniform:.1e}, skewed {skewed:.12f}")


def test_04_dice_identities(verdict):
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    perfect = dice_loss(Tensor(y.copy()), y).item()
    disjoint = dice_loss(Tensor(1.0 - y), y).item()
    half = dice_loss(Tensor(np.array([[1.0, 1.0], [0.0, 0.0]])), y).item()
    ok = perfect <= 1e-6 and disjoint >= 1 - 1e-6 and abs(half - 0.5) <= 1e-6
    assert verdict(4, "Dice identities", ok, f"{perfect:.1e} / {disjoint:.7f} / {half:.7f}")


# -- 5-7: behaviour at desk scale ------------------------------------------------------

def test_05_balance_effect(verdict, balance_runs):
    med = {lam: float(np.median([r.final_imp_cv2 for r in rs])) for lam, rs in balance_runs.items()}
    # experts of the winning tokens, noise-free, over the test split
    shares = np.array([r.routing.expert_share for r in balance_runs[0.01]])
    train_shares = np.array([r.train_winner_share for r in balance_runs[0.01]])
    ok = med[0.01] < med[0.0] and bool((shares >= 0.05).all())
    fmt = lambda a: " | ".join(" ".join(f"{v:.2f}" for v in row) for row in a)  # noqa: E731
    detail = (f"median imp CV^2 {med[0.01]:.4f} vs {med[0.0]:.4f}; winner-expert shares {fmt(shares)}; "
              f"last training epoch {fmt(train_shares)}")
    assert verdict(5, "balance loss lowers importance CV^2, every expert >= 5% of winners", ok, detail)


def test_06_modality_specialization(verdict, prompt_runs):
    point = prompt_runs[1]
    rs = point.routing
    dom = min(rs.dominant_share.values())
    minutes = point.report.wall_clock / 60
    ok = dom >= 0.4 and rs.mutual_information > 0.2 and minutes < 15
    assert verdict(6, "winner token tracks modality", ok,
                   f"min dominant {dom:.2f}, MI {rs.mutual_information:.3f} bits, {minutes:.1f} min")


def test_07_ppt_prompt_free(verdict, prompt_runs):
    ppt, point = prompt_runs
    free, pointed = ppt.dice("none"), point.dice("point")
    ok = free >= 0.85 and free >= pointed - 0.02
    assert verdict(7, "PPT without prompts vs point prompts", ok,
                   f"none {free:.4f}, point {pointed:.4f}, box {point.dice('box'):.4f}")


# -- 8-12: contracts --------------------------------------------------------------------

def test_08_head_selectivity(verdict, prompt_runs, corpus):
    model = prompt_runs[1].model
    test = load_split(model, corpus, "test")
    n = 32
    batch = make_batch(model, test.samples[:n], test.embeddings[:n], "point", np.random.default_rng(8))
    with T.no_grad():
        out = model.forward(batch)
        lo, hi = out.tokens.span("expert")
        toks = out.tokens.tokens.data.copy()
        for b, w in enumerate(out.winner):
            losers = [lo + t for t in range(hi - lo) if t != w]
            toks[b, losers] = 0.0
        pe = model.decoder.positional(model.grid, out.image.dtype)
        zeroed = predict_mask(TokenSequence(Tensor(toks), out.tokens.spans), out.image, out.winner,
                              model.decoder.head, pe, model.grid, batch.masks.shape[-2:])
    ok = zeroed.logits.data.tobytes() == out.prediction.logits.data.tobytes()
    assert verdict(8, "non-winner expert tokens zeroed -> identical logits", ok,
                   f"{n} images, winners {np.bincount(out.winner).tolist()}")


def test_09_frozen_encoder(verdict, prompt_runs, balance_runs):
    fresh = init_frozen(TrainConfig().encoder_seed).checksum()
    reports = [r.report for r in prompt_runs] + [r.report for rs in balance_runs.values() for r in rs]
    ok = all(r.encoder_checksum_before == r.encoder_checksum_after == fresh for r in reports)
    assert verdict(9, "encoder checksum unchanged by training", ok, f"{len(reports)} runs")


def test_10_determinism(verdict, tmp_path):
    cfg = tiny_config()
    data = in_memory_corpus(cfg.n_modalities, cfg.samples_per_modality, 7, split_ratio=0.75)
    train(cfg, data, tmp_path / "a")
    train(cfg, data, tmp_path / "b")
    names = ["train_log.csv", "eval_dice.csv", "winner_hist.csv"]
    same_csv = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    model = C.load_checkpoint(tmp_path / "a" / "model.sgmt")
    test = load_split(model, data, "test")
    d1, d2 = evaluate(model, test, "point").dice, evaluate(model, test, "point").dice
    ok = same_csv and d1.tobytes() == d2.tobytes()
    assert verdict(10, "same config+seed -> identical CSVs; repeated eval identical", ok)


def test_11_schedule(verdict, prompt_runs, runs_dir):
    with open(runs_dir / "point_baseline" / "train_log.csv") as f:
        lrs = [float(r["lr"]) for r in csv.DictReader(f)]
    expected = [1e-4] * 7 + [5e-5] * 5 + [2.5e-5] * 3
    assert verdict(11, "lr 1e-4 / 5e-5 / 2.5e-5 over epochs 1-7 / 8-12 / 13-15", lrs == expected,
                   " ".join(f"{v:g}" for v in lrs))


def test_12_checkpoint_round_trip(verdict, prompt_runs, corpus, runs_dir, tmp_path):
    point = prompt_runs[1]
    path = runs_dir / "point_baseline" / "model.sgmt"
    model = C.load_checkpoint(path)
    dice = evaluate(model, load_split(model, corpus, "test"), "point").dice
    same = dice.tobytes() == point.report.evals["point"].dice.tobytes()
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 3] ^= 0x10
    bad = tmp_path / "bad.sgmt"
    bad.write_bytes(bytes(raw))
    try:
        C.load_checkpoint(bad)
        rejected = False
    except C.CheckpointError as exc:
        rejected = "CRC" in str(exc)
    assert verdict(12, "checkpoint round-trip bit-identical; corruption rejected", same and rejected)
