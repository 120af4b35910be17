import random

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from patchforge.attack import AttackConfig, run_attack
from patchforge.errors import DatasetError, TransportError
from patchforge.evaluation import (
    Components,
    PairOutcome,
    ablate_config,
    aggregate,
    evaluate_impersonation,
    run_ablation,
    sample_pairs,
    summary_table,
    universality_eval,
)
from patchforge.imaging import FaceImage, save_image
from patchforge.oracle import Oracle
from patchforge.toy import make_face, toy_oracle, write_dataset


@pytest.fixture
def comps(backend, renderer):
    return Components(backend, renderer, toy_oracle())


def _dataset(root, ids, images=1):
    for i in ids:
        for k in range(images):
            save_image(make_face(i, variant=k), root / f"id{i:03d}" / f"{k}.png")
    return root


# -- pair sampling ------------------------------------------------------------------


def test_two_identities_one_pair(tmp_path):
    _dataset(tmp_path, [0, 1])
    ps = sample_pairs(tmp_path, 1, seed=0)
    (p,) = ps.pairs
    assert {p.source_id, p.target_id} == {"id000", "id001"}


def test_sampling_deterministic_and_distinct(tmp_path):
    write_dataset(tmp_path, identities=5, images=2)
    a, b = sample_pairs(tmp_path, 12, seed=3), sample_pairs(tmp_path, 12, seed=3)
    assert a == b
    assert all(p.source_id != p.target_id for p in a)
    assert len({(p.source, p.target) for p in a}) == 12
    assert sample_pairs(tmp_path, 12, seed=4) != a


def test_sampling_errors(tmp_path):
    _dataset(tmp_path, [0])
    with pytest.raises(DatasetError):
        sample_pairs(tmp_path, 1)
    _dataset(tmp_path, [1])
    with pytest.raises(DatasetError):
        sample_pairs(tmp_path, 2)
    with pytest.raises(DatasetError):
        sample_pairs(tmp_path / "missing", 1)


def test_screening_drops_unverifiable_sources(tmp_path):
    write_dataset(tmp_path, identities=3, images=2)
    odd = make_face(77)
    save_image(odd, tmp_path / "id000" / "1.png")  # no longer the same person as id000/0.png
    o = toy_oracle()
    ps = sample_pairs(tmp_path, 10, seed=0, oracle=o, threshold=0.8)
    assert o.queries == 6
    assert not any(p.source.startswith(str(tmp_path / "id000")) for p in ps)


def test_single_image_identity_not_screened(tmp_path):
    _dataset(tmp_path, [0, 1])
    o = toy_oracle()
    assert len(sample_pairs(tmp_path, 1, oracle=o)) == 1 and o.queries == 0


# -- aggregation --------------------------------------------------------------------


def test_fixture_arithmetic():
    r = aggregate([PairOutcome("a", "b", True, 10), PairOutcome("c", "d", True, 30), PairOutcome("e", "f", False, 200)])
    assert r.asr == pytest.approx(2 / 3) and r.mean_nq == 20 and r.evaluated == 3


def test_all_fail_gives_null_nq():
    r = aggregate([PairOutcome("a", "b", False, 201)])
    assert r.asr == 0 and r.mean_nq is None
    assert aggregate([]).asr is None


outcome = st.builds(PairOutcome, st.just("s"), st.just("t"), st.booleans(), st.integers(1, 400),
                    error=st.none() | st.just("TransportError: down"))


@given(st.lists(outcome, max_size=40), st.randoms())
def test_aggregate_matches_brute_force_and_is_order_free(items, rnd):
    rep = aggregate(items)
    done = [o for o in items if o.error is None]
    wins = [o.nq for o in done if o.success]
    assert rep.errors == len(items) - len(done)
    if done:
        assert rep.asr == len(wins) / len(done)
    if wins:
        assert rep.mean_nq == pytest.approx(sum(wins) / len(wins), abs=1e-9)
    else:
        assert rep.mean_nq is None
    shuffled = list(items)
    rnd.shuffle(shuffled)
    other = aggregate(shuffled)
    assert other.asr == rep.asr
    assert other.mean_nq == (None if rep.mean_nq is None else pytest.approx(rep.mean_nq, abs=1e-9))


# -- sweeps --------------------------------------------------------------------------


def test_evaluate_records_pair_failures(tmp_path, backend, renderer):
    write_dataset(tmp_path, identities=3)
    pairs = sample_pairs(tmp_path, 3, seed=1)

    class SometimesDown(Oracle):
        def __init__(self):
            super().__init__("flaky")
            self.inner = toy_oracle()
            self.calls = 0

        def _raw(self, image):
            self.calls += 1
            if self.calls == 1:
                raise TransportError("boom")
            return self.inner._raw(image)

    cfg = AttackConfig(grad_mode="zeroth_order", zo_samples=1, N=2, threshold=1.1)
    rep = evaluate_impersonation(pairs, cfg, Components(backend, renderer, SometimesDown()))
    assert rep.errors == 1 and rep.evaluated == 2 and rep.asr == 0.0
    assert rep.outcomes[0].error.startswith("TransportError")
    assert rep.config["N"] == 2


def test_evaluate_matches_individual_runs(tmp_path, comps):
    write_dataset(tmp_path, identities=4)
    pairs = sample_pairs(tmp_path, 3, seed=2)
    cfg = AttackConfig(N=30)
    rep = evaluate_impersonation(pairs, cfg, comps)
    from patchforge.imaging import load_image

    for p, o in zip(pairs, rep.outcomes):
        res = run_attack(load_image(p.source), load_image(p.target), cfg, comps.backend, comps.renderer, toy_oracle())
        assert (o.success, o.nq) == (res.success, res.nq)


def test_ablation_zeroes_weights(tmp_path, comps):
    cfg = ablate_config(AttackConfig(), disable_attn=True, disable_dir=True)
    assert (cfg.weights.lambda_attn, cfg.weights.lambda_dir, cfg.weights.lambda_adv) == (0, 0, 10)
    res = run_attack(make_face(1), make_face(2), cfg, comps.backend, comps.renderer, comps.oracle)
    for r in res.loss_trace:
        assert r.total == pytest.approx(10 * r.adv, abs=1e-12)


def test_run_ablation_pairs_and_deltas(tmp_path, comps):
    write_dataset(tmp_path, identities=3)
    pairs = sample_pairs(tmp_path, 2, seed=0)
    rep = run_ablation(pairs, AttackConfig(N=40), comps, disable_dir=True)
    assert [o.source for o in rep.baseline.outcomes] == [o.source for o in rep.ablated.outcomes]
    assert rep.ablated.config["weights"]["lambda_dir"] == 0
    if rep.baseline.mean_nq is not None and rep.ablated.mean_nq is not None:
        assert rep.delta_mean_nq == pytest.approx(rep.ablated.mean_nq - rep.baseline.mean_nq)
    assert rep.to_json()["disable_dir"] is True


# -- universality ------------------------------------------------------------------------


def test_universality_own_source(comps):
    src, tgt = make_face(10), make_face(11)
    res = run_attack(src, tgt, AttackConfig(), comps.backend, comps.renderer, comps.oracle)
    assert res.success
    rep = universality_eval(res.final_patch, [src], tgt, comps, threshold=0.8)
    assert rep.pool_size == 1 and rep.matches == 1 and rep.universal_asr == 1.0


def test_universality_empty_pool(comps):
    rep = universality_eval(make_face(0), [], make_face(1), comps)
    assert rep.pool_size == 0 and rep.universal_asr is None and comps.oracle.queries == 0


def test_universality_inclusive_and_exclusive(comps):
    pool = [make_face(i, variant=v) for i in (1, 2, 3) for v in (0, 1)]
    for f, ident in zip(pool, ["a", "a", "b", "b", "c", "c"]):
        f.identity = ident
    patch = make_face(9)
    rep = universality_eval(patch, pool, make_face(9), comps, threshold=0.5, source_identity="a")
    assert rep.pool_size == 6 and rep.exclusive_pool_size == 4
    excl = [o for o in rep.outcomes if o.identity != "a"]
    assert rep.exclusive_matches == sum(o.match for o in excl)
    assert rep.universal_asr == rep.matches / 6


def test_universality_order_invariant(comps):
    pool = [make_face(i) for i in range(8)]
    patch, target = make_face(20), make_face(21)
    a = universality_eval(patch, pool, target, comps, threshold=0.6)
    shuffled = list(pool)
    random.Random(0).shuffle(shuffled)
    b = universality_eval(patch, shuffled, target, comps, threshold=0.6)
    assert a.universal_asr == b.universal_asr and a.matches == b.matches


def test_universality_render_failure_recorded(backend):
    from patchforge.render import PatchRegion, Renderer

    comps = Components(backend, Renderer(PatchRegion.lower_face(16, 16)), toy_oracle())
    pool = [make_face(1), FaceImage(torch.zeros(3, 8, 8, dtype=torch.float64), "small")]
    rep = universality_eval(make_face(5), pool, make_face(6), comps)
    assert rep.pool_size == 2 and rep.outcomes[1].error.startswith("ConfigurationError")


def test_summary_table():
    r = aggregate([PairOutcome("a", "b", True, 25), PairOutcome("c", "d", False, 5)])
    text = summary_table([("linear", "toy", r), ("none", "toy", aggregate([]))])
    lines = text.splitlines()
    assert lines[0].split() == ["Model", "Dataset", "ASR", "NQ"]
    assert lines[2].split() == ["linear", "toy", "50.00%", "25.00"]
    assert lines[3].split() == ["none", "toy", "-", "-"]
