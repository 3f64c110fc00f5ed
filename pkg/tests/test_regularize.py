from dataclasses import replace

import numpy as np
import pytest

from modalanchor import adcore as ad
from modalanchor.adcore import ParamStore, Tensor
from modalanchor.encoder import DualEncoder, embed_text, embed_visual, similarity_matrix
from modalanchor.errors import ContractError, InputError, ParameterError
from modalanchor.regularize import (
    ConsolidationRecord,
    EWCPenalty,
    FisherEstimate,
    adaptive_lambdas,
    combined_loss,
    consistency_from_similarity,
    consistency_loss,
    dual_encoder_terms,
    estimate_fisher,
    ewc_penalty,
    make_snapshot,
    probe_consistency,
)
from modalanchor.taskgen import StreamTemplate, generate_task_stream
from modalanchor.trainer import History, Strategy, TrainConfig, consolidate, train_task

from modalanchor.checks import TINY


class Toy:
    """Minimal model object for estimate_fisher: a ParamStore plus identity weights."""

    def __init__(self, params: ParamStore):
        self.params = params

    def weights(self, leaves):
        return dict(leaves)


def toy_terms(model, w, batch):
    x, y = batch
    pred = ad.tanh(ad.linear(x, w["w"], w["b"]))
    return ad.sum(ad.square(pred - y), axis=1)


def toy_loss_numpy(values, x, y):
    pred = np.tanh(x @ values["w"] + values["b"])
    return float(((pred - y) ** 2).sum())


def fd_fisher(values, xs, ys, loss, h=1e-6):
    out = {n: np.zeros_like(v) for n, v in values.items()}
    for x, y in zip(xs, ys):
        for name, v in values.items():
            for idx in np.ndindex(v.shape):
                up = {k: a.copy() for k, a in values.items()}
                dn = {k: a.copy() for k, a in values.items()}
                up[name][idx] += h
                dn[name][idx] -= h
                g = (loss(up, x, y) - loss(dn, x, y)) / (2 * h)
                out[name][idx] += g * g
    return {n: v / len(xs) for n, v in out.items()}


def test_fisher_matches_finite_difference_oracle():
    rng = np.random.default_rng(0)
    p = ParamStore()
    p.add("w", rng.normal(size=(3, 2)), "visual")
    p.add("b", rng.normal(size=2), "cross_modal")
    assert p.count() <= 10
    x = rng.normal(size=(7, 3))
    y = rng.normal(size=(7, 2))
    est = estimate_fisher(Toy(p), (x, y), 7, loss_terms=toy_terms, batch_size=3)
    oracle = fd_fisher(p.values, x[:, None], y[:, None], lambda v, a, b: toy_loss_numpy(v, a, b))
    assert est.sample_count == 7
    for name in oracle:
        np.testing.assert_allclose(est.values[name], oracle[name], rtol=0, atol=1e-6)


def test_fisher_contrastive_terms_match_finite_differences(tiny_model, tiny_batch):
    images, captions = tiny_batch
    est = estimate_fisher(tiny_model, (images, captions), 5, batch_size=5)
    base = tiny_model.params.values
    h = 1e-6

    def term(values, i):
        w = {n: Tensor(v) for n, v in values.items()}
        return dual_encoder_terms(tiny_model, w, (images, captions)).data[i]

    for name in ("cross.proj_v", "text.b", "cross.log_temp"):
        oracle = np.zeros_like(base[name])
        for i in range(5):
            for idx in np.ndindex(base[name].shape):
                up = {k: v.copy() for k, v in base.items()}
                dn = {k: v.copy() for k, v in base.items()}
                up[name][idx] += h
                dn[name][idx] -= h
                g = (term(up, i) - term(dn, i)) / (2 * h)
                oracle[idx] += g * g / 5
        np.testing.assert_allclose(est.values[name], oracle, rtol=0, atol=1e-6)


def test_fisher_one_parameter_hand_case():
    # L_i = (theta·x_i − y_i)², theta=1; grads 2x(theta x − y): x=1,y=0 → 2; x=2,y=1 → 4
    p = ParamStore()
    p.add("theta", np.array([1.0]), "visual")

    def terms(model, w, batch):
        x, y = batch
        return ad.square(ad.mul(ad.take(w["theta"], np.zeros(len(x), dtype=int)), x) - y)

    est = estimate_fisher(Toy(p), (np.array([1.0, 2.0]), np.array([0.0, 1.0])), 2, loss_terms=terms)
    np.testing.assert_allclose(est.values["theta"], [(4.0 + 16.0) / 2])


def test_fisher_zero_for_constant_loss():
    p = ParamStore()
    p.add("w", np.ones(3), "visual")
    est = estimate_fisher(Toy(p), (np.ones((4, 1)),), 4, loss_terms=lambda m, w, b: ad.mul(ad.sum(w["w"]), 0.0) + np.ones(len(b[0])))
    assert all(np.all(v == 0) for v in est.values.values())


def test_fisher_nonnegative_and_covers_model(tiny_model, tiny_batch):
    est = estimate_fisher(tiny_model, tiny_batch, 5)
    assert set(est.values) == set(tiny_model.params)
    assert np.all(est.flat() >= 0)


def test_fisher_errors(tiny_model):
    with pytest.raises(InputError):
        estimate_fisher(tiny_model, (np.zeros((0, 6)), np.zeros((0, 3), dtype=int)), 5)
    with pytest.raises(ParameterError):
        estimate_fisher(tiny_model, (np.zeros((1, 6)), np.zeros((1, 3), dtype=int)), 0)


def _fisher(means):
    groups = {"v": "visual", "t": "textual", "c": "cross_modal"}
    values = {n: np.full(2, m) for n, m in zip(groups, means)}
    return FisherEstimate(values, groups, 1)


def test_adaptive_lambdas():
    assert adaptive_lambdas(_fisher((2, 1, 1)), 1.0) == pytest.approx(
        {"visual": 1.5, "textual": 0.75, "cross_modal": 0.75}
    )
    assert list(adaptive_lambdas(_fisher((3, 3, 3)), 2.0).values()) == pytest.approx([2.0] * 3)
    assert set(adaptive_lambdas(_fisher((0, 0, 0)), 2.0).values()) == {2.0}
    with pytest.raises(ParameterError):
        adaptive_lambdas(_fisher((1, 1, 1)), 0.0)


def _hand_record(lam=0.5):
    fisher = FisherEstimate({"theta": np.array([1.0, 2.0])}, {"theta": "all"}, 1)
    return ConsolidationRecord({"theta": np.zeros(2)}, fisher, {"all": lam})


def _theta(value):
    p = ParamStore()
    p.add("theta", np.asarray(value, dtype=float), "visual")
    return p


def test_ewc_hand_case():
    assert ewc_penalty(_theta([1.0, 1.0]), [_hand_record()]).item() == pytest.approx(1.5, abs=1e-15)


def test_ewc_zero_at_anchor():
    assert ewc_penalty(_theta([0.0, 0.0]), [_hand_record()]).item() == 0.0


def test_ewc_linear_in_lambda():
    a = ewc_penalty(_theta([0.3, -2.0]), [_hand_record(0.5)]).item()
    b = ewc_penalty(_theta([0.3, -2.0]), [_hand_record(1.0)]).item()
    assert b == 2 * a


def test_ewc_records_sum():
    one = ewc_penalty(_theta([1.0, 1.0]), [_hand_record()]).item()
    assert ewc_penalty(_theta([1.0, 1.0]), [_hand_record(), _hand_record()]).item() == pytest.approx(2 * one)


def test_ewc_gradient_formula():
    theta = Tensor([0.4, -1.0], requires_grad=True, name="theta")
    ad.backward(ewc_penalty({"theta": theta}, [_hand_record(0.5)]))
    np.testing.assert_allclose(theta.grad, 2 * 0.5 * np.array([1.0, 2.0]) * np.array([0.4, -1.0]))


def test_ewc_shape_mismatch():
    with pytest.raises(ContractError):
        ewc_penalty(_theta([1.0, 1.0, 1.0]), [_hand_record()])


def test_ewc_fixing_matches_full_penalty(tiny_model):
    rng = np.random.default_rng(4)
    vals = tiny_model.params.values
    fisher = FisherEstimate({n: rng.uniform(size=v.shape) for n, v in vals.items()}, dict(tiny_model.params.groups), 3)
    rec = ConsolidationRecord({n: v + rng.normal(size=v.shape) for n, v in vals.items()}, fisher, {g: 0.7 for g in ad.GROUPS})
    full = EWCPenalty([rec])(tiny_model.params).item()
    frozen = ["visual.w1", "text.embed"]
    fixed = EWCPenalty([rec]).fixing({n: vals[n] for n in frozen})
    assert fixed(tiny_model.params).item() == pytest.approx(full, rel=1e-12)


def test_consistency_identity_is_zero(tiny_model, tiny_batch):
    snap = make_snapshot(tiny_model, *tiny_batch)
    assert consistency_loss(tiny_model, snap).item() == pytest.approx(0.0, abs=1e-12)


def test_consistency_extreme_bound():
    assert consistency_from_similarity(Tensor(np.ones((3, 3))), -np.ones((3, 3))).item() == 2.0


def test_consistency_two_pair_hand_case():
    s = np.sqrt(0.5)
    V = np.array([[1.0, 0.0], [0.0, 1.0]])
    T = np.array([[s, s], [0.0, 1.0]])
    old = np.array([[1.0, 0.0], [0.0, 1.0]])
    # S_cur = [[s, 0], [s, 1]]; |Δ| = [[1−s, 0], [s, 0]]
    expected = ((1 - s) + s) / 4
    got = consistency_from_similarity(similarity_matrix(V, T), old).item()
    assert got == pytest.approx(expected, abs=1e-15)


def test_consistency_permutation_invariant(tiny_model, tiny_batch):
    images, captions = tiny_batch
    old = tiny_model.copy()
    for n, v in old.params.values.items():
        old.params.values[n] = v + 0.2
    snap = make_snapshot(old, images, captions)
    perm = [3, 0, 4, 1, 2]
    snap_p = make_snapshot(old, images[perm], captions[perm])
    assert consistency_loss(tiny_model, snap).item() == pytest.approx(consistency_loss(tiny_model, snap_p).item(), abs=1e-14)
    assert consistency_loss(tiny_model, snap).item() > 0


def test_consistency_dim_mismatch(tiny_model, tiny_batch):
    other = DualEncoder(replace(TINY, d_e=3))
    snap = make_snapshot(other, *tiny_batch)
    with pytest.raises(ContractError):
        consistency_loss(tiny_model, snap)


def test_probe_consistency_matches_composite(tiny_model, tiny_batch):
    images, captions = tiny_batch
    snaps = []
    for shift in (0.1, -0.2):
        old = tiny_model.copy()
        for n, v in old.params.values.items():
            old.params.values[n] = v + shift
        snaps.append(make_snapshot(old, images[:3], captions[:3]))
    head_i, head_c = images[3:], captions[3:]
    allv = np.concatenate([head_i] + [s.probe_images for s in snaps])
    allc = np.concatenate([head_c] + [s.probe_captions for s in snaps])
    fused = probe_consistency(embed_visual(tiny_model, allv), embed_text(tiny_model, allc), 2, [s.old_similarity for s in snaps])
    composite = np.mean([consistency_loss(tiny_model, s).item() for s in snaps])
    assert fused.item() == pytest.approx(composite, abs=1e-14)


def test_combined_loss_cases():
    task = Tensor(0.7)
    rec = [_hand_record()]
    params = _theta([1.0, 1.0])
    assert combined_loss(task, params, [], [], 1.0) is task
    beta = 0.5
    got = combined_loss(task, params, rec, ["snapshot"], beta, consistency=[Tensor(2.0)]).item()
    assert got == pytest.approx(0.7 + 1.5 + beta * 2, abs=1e-15)
    assert combined_loss(task, params, rec, ["snapshot"], 0.0, consistency=[Tensor(2.0)]).item() == pytest.approx(2.2)
    with pytest.raises(ParameterError):
        combined_loss(task, params, rec, [], -1.0)


def test_combined_loss_gradient(tiny_model, tiny_batch):
    from modalanchor.checks import run_gradcheck

    assert run_gradcheck(["combined_loss", "ewc_penalty", "consistency_loss"]) == pytest.approx(
        {"combined_loss": 0, "ewc_penalty": 0, "consistency_loss": 0}, abs=1e-4
    )


@pytest.mark.slow
def test_monotone_protection():
    template = StreamTemplate(n_train=(160, 160), n_eval=32)
    cfg = replace(TINY, d_v=16, vocab=128, max_len=4, d_h=16, d_e=8, temperature=0.1)
    tasks = generate_task_stream(3, 2, template, cfg)
    tc = TrainConfig(epochs=2, batch_size=32, n_fisher=64)
    displacement = []
    for lam in (0.0, 1.0, 10.0):
        strategy = Strategy("ewc_standard", lambda_base=lam)
        model = DualEncoder(cfg)
        history = History()
        train_task(model, tasks[0], strategy, history, tc, np.random.default_rng(0))
        record, _ = consolidate(model, tasks[0], replace(strategy, lambda_base=max(lam, 1e-12)), tc)
        record.lambdas = {k: lam for k in record.lambdas}
        history.records.append(record)
        train_task(model, tasks[1], strategy if lam else replace(strategy, lambda_base=0.0), history, tc, np.random.default_rng(1))
        d = np.sqrt(sum(((model.params[n] - record.anchor[n]) ** 2).sum() for n in record.anchor))
        displacement.append(d)
    assert displacement[0] > displacement[1] > displacement[2]
