import json

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from ibmea.errors import ConfigError, NumericalError
from ibmea.mmkg import NoiseSpec, generate_synthetic_task
from ibmea.objectives import BatchPairs
from ibmea.training import (
    AblationConfig,
    CheckpointError,
    IterativeConfig,
    TrainConfig,
    compute_losses,
    init_state,
    iterative_expand,
    load_checkpoint,
    load_config,
    run_training,
    save_checkpoint,
    train_step,
)


def params_snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_identical_runs_identical_losses(task20, tiny_cfg):
    runs = []
    for _ in range(2):
        state = init_state(task20, tiny_cfg)
        runs.append([train_step(state, task20, tiny_cfg)[1] for _ in range(10)])
    assert runs[0] == runs[1]


def test_zero_learning_rate_freezes_parameters(task20, tiny_cfg):
    cfg = tiny_cfg.replace(learning_rate=0.0, weight_decay=0.0)
    state = init_state(task20, cfg)
    before = params_snapshot(state.model)
    data, model = state.data, state.model
    batch = BatchPairs(torch.as_tensor(task20.train_pairs))
    means = [compute_losses(model, data, batch, cfg, sample=False)[0].item()]
    for _ in range(5):
        train_step(state, task20, cfg)
        means.append(compute_losses(model, data, batch, cfg, sample=False)[0].item())
    for n, p in state.model.named_parameters():
        assert torch.equal(p, before[n]), n
    assert len(set(means)) == 1


def test_loss_decreases_on_tiny_tasks():
    decreasing = 0
    for seed in range(20):
        task = generate_synthetic_task(20, 4, 8, 6, 0.15, NoiseSpec(), 0.5, seed)
        cfg = TrainConfig(rng_seed=seed, model=tiny_model_config())
        state = init_state(task, cfg)
        losses = [train_step(state, task, cfg)[1] for _ in range(50)]
        decreasing += losses[-1] < losses[0]
    assert decreasing >= 19


def test_total_is_specific_plus_hybrid(task20, tiny_cfg):
    for variant in ("full", "Hybrid-IB", "w/o A-IB", "w/o image"):
        cfg = tiny_cfg.replace(ablation=AblationConfig.from_variant(variant), use_discriminator=True)
        state = init_state(task20, cfg)
        gen = torch.Generator().manual_seed(1)
        _, terms, _ = compute_losses(state.model, state.data, BatchPairs(task20.train_pairs), cfg, gen)
        spec = sum(
            cfg.beta[m] * terms.get(f"kl_{m}", 0.0) + terms[f"align_{m}"] for m in cfg.modalities
        )
        hyb = terms["hybrid"] + cfg.ablation.beta_hybrid * terms.get("kl_hybrid", 0.0)
        assert abs(terms["total"].item() - (spec + hyb).item()) < 1e-6
        assert abs(terms["specific"].item() - spec.item()) < 1e-9


def _terms(task, cfg):
    state = init_state(task, cfg)
    gen = torch.Generator().manual_seed(2)
    return compute_losses(state.model, state.data, BatchPairs(task.train_pairs), cfg, gen)[1]


def test_ablation_changes_only_targeted_terms(task20, tiny_cfg):
    full = _terms(task20, tiny_cfg)
    assert {k for k in full if k.startswith("kl_")} == {"kl_g", "kl_v", "kl_a", "kl_r"}

    no_a = _terms(task20, tiny_cfg.replace(ablation=AblationConfig(no_ib=["a"])))
    assert "kl_a" not in no_a and "align_a" in no_a
    for m in "gvr":
        assert no_a[f"kl_{m}"].item() == full[f"kl_{m}"].item()

    hyb = _terms(task20, tiny_cfg.replace(ablation=AblationConfig(hybrid_ib=True)))
    assert not any(k in hyb for k in ("kl_g", "kl_v", "kl_a", "kl_r"))
    assert "kl_hybrid" in hyb and "kl_hybrid" not in full

    drop = _terms(task20, tiny_cfg.replace(ablation=AblationConfig(drop=["v"])))
    assert "align_v" not in drop and "kl_v" not in drop
    assert drop["kl_g"].item() == full["kl_g"].item()


def test_dropped_modality_gets_zero_attention(task20, tiny_cfg):
    cfg = tiny_cfg.replace(ablation=AblationConfig(drop=["r"]))
    state = init_state(task20, cfg)
    _, _, h = compute_losses(state.model, state.data, BatchPairs(task20.train_pairs), cfg)
    assert torch.all(h[0].attention[:, 3] == 0)
    torch.testing.assert_close(h[0].attention.sum(1), torch.ones(20, dtype=torch.float64))


def test_iterative_disabled_never_adds(task20, tiny_cfg):
    cfg = tiny_cfg.replace(epochs=6, iterative=IterativeConfig(enabled=False, start_epoch=1, period=1))
    state, _ = run_training(task20, cfg)
    assert state.pseudo_pairs == [] and state.expansion_rounds == 0


def test_stable_rule_needs_two_rounds(task20, tiny_cfg):
    cfg = tiny_cfg.replace(iterative=IterativeConfig(start_epoch=0, period=1))
    state = init_state(task20, cfg)
    iterative_expand(state, task20, cfg)
    assert state.pseudo_pairs == [] and state.prev_mnn
    first = set(state.prev_mnn)
    iterative_expand(state, task20, cfg)  # unchanged model -> same MNN set
    assert {(a, b) for a, b, _ in state.pseudo_pairs} == first
    # forge a previous round where one pair was not mutually nearest
    dropped = sorted(first)[0]
    state.prev_mnn = first - {dropped}
    iterative_expand(state, task20, cfg)
    assert dropped not in {(a, b) for a, b, _ in state.pseudo_pairs}
    gold_left = set(task20.train_pairs[:, 0].tolist())
    assert all(a not in gold_left for a, _, _ in state.pseudo_pairs)


def test_mnn_rule_adds_immediately(task20, tiny_cfg):
    cfg = tiny_cfg.replace(iterative=IterativeConfig(start_epoch=0, period=1, confidence_rule="MNN"))
    state = init_state(task20, cfg)
    iterative_expand(state, task20, cfg)
    assert len(state.pseudo_pairs) == len(state.prev_mnn) > 0


def test_expansion_recovers_zero_noise_pairs():
    task = generate_synthetic_task(100, 10, 60, 32, 0.05, NoiseSpec(), 0.3, 0)
    cfg = TrainConfig(epochs=200, eval_every=200, iterative=IterativeConfig(enabled=False))
    state, history = run_training(task, cfg)
    cfg = cfg.replace(iterative=IterativeConfig())
    iterative_expand(state, task, cfg)
    iterative_expand(state, task, cfg)
    found = {(a, b) for a, b, _ in state.pseudo_pairs}
    # brute-force oracle over the unaligned entities (all test-side here)
    z1 = state.model.embed(0, state.data[0]).detach().numpy()
    z2 = state.model.embed(1, state.data[1]).detach().numpy()
    left, right = np.sort(task.test_pairs[:, 0]), np.sort(task.test_pairs[:, 1])
    a = z1[left] / np.linalg.norm(z1[left], axis=1, keepdims=True)
    b = z2[right] / np.linalg.norm(z2[right], axis=1, keepdims=True)
    s = a @ b.T
    best12, best21 = s.argmax(1), s.argmax(0)
    mutual = {(int(left[i]), int(right[j])) for i, j in enumerate(best12) if best21[j] == i}
    assert found == mutual
    gold = {tuple(p) for p in task.test_pairs.tolist()}
    assert len(found & gold) / len(found) >= history[-1]["h1"]


def test_zero_epochs_baseline(task20, tiny_cfg):
    state, history = run_training(task20, tiny_cfg.replace(epochs=0))
    assert len(history) == 1 and history[0]["epoch"] == 0 and state.global_step == 0
    assert history[0]["n_pairs"] == len(task20.test_pairs)


def test_seeded_history_reproducible(task20, tiny_cfg):
    cfg = tiny_cfg.replace(epochs=6, iterative=IterativeConfig(start_epoch=2, period=2))
    a = run_training(task20, cfg)[1]
    b = run_training(task20, cfg)[1]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    c = run_training(task20, cfg.replace(rng_seed=1))[1]
    assert json.dumps(a, sort_keys=True) != json.dumps(c, sort_keys=True)


def test_resume_reproduces_trajectory(task20, tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(epochs=8, iterative=IterativeConfig(start_epoch=2, period=2))
    full_state, full_hist = run_training(task20, cfg)

    half, _ = run_training(task20, cfg.replace(epochs=4))
    save_checkpoint(half, cfg, tmp_path / "mid")
    resumed, _ = load_checkpoint(tmp_path / "mid", task20)
    assert resumed.epoch == 4
    resumed, hist = run_training(task20, cfg, state=resumed)
    assert json.dumps(hist, sort_keys=True) == json.dumps(full_hist[-len(hist):], sort_keys=True)
    for (n, p), q in zip(full_state.model.named_parameters(), resumed.model.parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_errors(task20, tiny_cfg, tmp_path):
    state = init_state(task20, tiny_cfg)
    save_checkpoint(state, tiny_cfg, tmp_path / "ck")
    (tmp_path / "ck.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck", task20)
    other = generate_synthetic_task(25, 4, 8, 6, 0.15, NoiseSpec(), 0.5, 3)
    save_checkpoint(state, tiny_cfg, tmp_path / "ok")
    with pytest.raises(CheckpointError, match="dimensions"):
        load_checkpoint(tmp_path / "ok", other)


def test_config_schema(tmp_path):
    full = TrainConfig().to_dict()
    assert TrainConfig.from_dict(full) == TrainConfig()
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({**full, "bogus": 1})
    with pytest.raises(ConfigError, match="iterative.when"):
        TrainConfig.from_dict({**full, "iterative": {"when": 3}})
    partial = {k: v for k, v in full.items() if k != "tau"}
    with pytest.raises(ConfigError, match="tau"):
        TrainConfig.from_dict(partial)
    assert TrainConfig.from_dict({"epochs": 3}, partial=True).epochs == 3
    with pytest.raises(ConfigError):
        TrainConfig(iterative=IterativeConfig(period=0))
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_non_finite_loss_aborts(task20, tiny_cfg):
    state = init_state(task20, tiny_cfg)
    with torch.no_grad():
        state.model.encoders.modal["a"].fc.weight.fill_(np.nan)
    with pytest.raises(NumericalError) as info:
        train_step(state, task20, tiny_cfg)
    assert "align_a" in info.value.terms and "total" in info.value.terms
