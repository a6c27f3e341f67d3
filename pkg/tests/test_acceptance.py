"""End-to-end acceptance criteria on the 20-class, 5-task synthetic stream.

Every test records one ``criterion k: PASS|FAIL`` line with the measured
numbers; the lines are printed together at the end of the session.
"""

import json
import os
from dataclasses import replace

import numpy as np
import pytest

import promptcl.tensor as T
from conftest import ACCEPTANCE_LINES
from promptcl.analysis import (DEFAULT_GRID, emit_report, mean_forgetting, prompt_similarity, select_reg_strength,
                               summary_table, sweep, sweep_trends)
from promptcl.backbone import ViTConfig, forward_features, save_backbone
from promptcl.cli import main
from promptcl.config import Config
from promptcl.data import generate_synthetic, split_stream, to_float
from promptcl.engine import MethodConfig, StreamRunner, TrainConfig, pretrain_backbone, run_stream
from promptcl.methods import (NMCHead, RegState, assemble_prompts, masked_cross_entropy, si_begin_task,
                              si_consolidate, si_penalty)
from promptcl.tensor import Tape, Tensor, finite_diff_check

pytestmark = pytest.mark.acceptance

CANDIDATES = Config()["reg"]["candidates"]


def record(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- shared fixtures ---------------------------------------------------------------


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def backbone(cfg):
    b = cfg["backbone"]
    upstream = generate_synthetic(b["pretrain_classes"], b["pretrain_train"], b["pretrain_test"], cfg.grating(),
                                  b["pretrain_data_seed"])
    return pretrain_backbone(upstream, cfg.vit(), cfg.finetune(), b["pretrain_seed"])


@pytest.fixture(scope="session")
def toy(cfg):
    s = cfg["stream"]
    data = generate_synthetic(s["n_classes"], s["n_train"], s["n_test"], cfg.grating(), s["data_seed"])
    return data, split_stream(data, s["n_tasks"], s["stream_seed"])


@pytest.fixture(scope="session")
def pool_runs(toy, backbone):
    data, stream = toy
    method = MethodConfig(strategy="pool", pool_size=10, top_n=3)
    return [run_stream(data, stream, backbone, method, TrainConfig(seed=s)) for s in range(5)]


@pytest.fixture(scope="session")
def default_sweep(toy, backbone):
    data, stream = toy
    return sweep(data, stream, backbone, DEFAULT_GRID, (0, 1, 2))


# -- 1 -----------------------------------------------------------------------------


def test_gradient_fidelity(toy, backbone):
    data, stream = toy
    assert backbone.config.depth == 2 and backbone.config.embed_dim == 32
    sel = stream.train_idx[1][:4]
    images, labels = to_float(data.images[sel]), data.labels[sel]
    worst = {}
    for method in (MethodConfig(strategy="only_prompt", n_params=80), MethodConfig(strategy="pool", pool_size=4,
                                                                                    top_n=2),
                   MethodConfig(strategy="weighted", pool_size=3)):
        runner = StreamRunner(data, stream, backbone, method, TrainConfig())
        queries = runner._queries(sel)

        def loss():
            asm = assemble_prompts(runner.prompt, queries, len(sel))
            feats = forward_features(images, asm.prompts, backbone)
            total = masked_cross_entropy(runner.head.logits(feats), labels, stream.tasks[1])
            if asm.surrogate is not None:
                total = T.add(total, T.scale(asm.surrogate, 0.5))
            return total

        leaves = list(runner.trainable().values())
        worst[method.strategy] = finite_diff_check(loss, leaves, h=1e-5)
    err = max(worst.values())
    record(1, err < 1e-4, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + " (bound 1e-4)")


# -- 2 -----------------------------------------------------------------------------


def test_masking_law():
    rng = np.random.default_rng(0)
    failures = 0
    for _ in range(100):
        b, c = int(rng.integers(1, 9)), int(rng.integers(2, 21))
        active = np.sort(rng.choice(c, size=int(rng.integers(1, c)), replace=False))
        inactive = np.setdiff1d(np.arange(c), active)
        labels = rng.choice(active, size=b)
        logits = Tensor(rng.normal(scale=3.0, size=(b, c)), requires_grad=True)
        with Tape() as tape:
            loss = masked_cross_entropy(logits, labels, active)
        tape.backward(loss)
        bumped = logits.data.copy()
        bumped[:, inactive] += rng.normal(scale=50.0, size=(b, len(inactive)))
        loss2 = masked_cross_entropy(Tensor(bumped), labels, active)
        zero_grad = np.all(logits.grad[:, inactive] == 0.0)
        same = np.float64(loss.data).tobytes() == np.float64(loss2.data).tobytes()
        failures += not (zero_grad and same)
    record(2, failures == 0, f"{100 - failures}/100 batches with exactly zero inactive gradients and bitwise-equal loss")


# -- 3 -----------------------------------------------------------------------------


def test_collapse_and_no_query(toy, backbone, pool_runs):
    data, stream = toy
    rises = [r.p_sim[-1] > r.p_sim_init for r in pool_runs]
    # the query-free pool (M=1, top_n=1) is a single shared prompt of one pool entry's size
    size = MethodConfig().prompt_length * backbone.config.embed_dim
    shared = [run_stream(data, stream, backbone, MethodConfig(strategy="only_prompt", n_params=size),
                         TrainConfig(seed=s)) for s in range(5)]
    pool_acc = float(np.mean([r.final_acc for r in pool_runs]))
    shared_acc = float(np.mean([r.final_acc for r in shared]))
    ok = sum(rises) >= 4 and shared_acc >= pool_acc - 0.02
    psim = ", ".join(f"{r.p_sim_init:.1f}->{r.p_sim[-1]:.1f}" for r in pool_runs)
    record(3, ok, f"P_sim rose in {sum(rises)}/5 seeds ({psim}); accuracy no-query {100 * shared_acc:.1f}% vs "
                  f"pool {100 * pool_acc:.1f}% (need >= pool - 2)")


# -- 4 -----------------------------------------------------------------------------


def test_no_query_equivalence(toy, backbone):
    data, stream = toy
    train = TrainConfig(surrogate=0.0)
    pool = StreamRunner(data, stream, backbone, MethodConfig(strategy="pool", pool_size=1, top_n=1), train)
    plain = StreamRunner(data, stream, backbone, MethodConfig(strategy="only_prompt", n_params=32), train)
    plain.prompt.values.data[...] = pool.prompt.values.data.reshape(plain.prompt.values.shape)
    for k, p in plain.head.params().items():
        p.data[...] = pool.head.params()[k].data
    rng = np.random.default_rng(0)
    diverged = None
    for step in range(100):
        t = step // 20
        sel = rng.choice(stream.train_idx[t], size=16, replace=False)
        la, lb = pool._step(sel, stream.tasks[t]), plain._step(sel, stream.tasks[t])
        same = la == lb and pool.prompt.values.data.tobytes() == plain.prompt.values.data.tobytes()
        same = same and all(pool.head.params()[k].data.tobytes() == p.data.tobytes()
                            for k, p in plain.head.params().items())
        if not same:
            diverged = step
            break
    record(4, diverged is None, "bitwise-identical prompt, head and loss for 100 steps" if diverged is None
           else f"trajectories diverged at step {diverged}")


# -- 5 -----------------------------------------------------------------------------


def test_parameter_band(default_sweep):
    result, _ = default_sweep
    failed = [p for p in result.points if p.status != "ok"]
    tr = sweep_trends(result)
    acc = result.mean_by_n("final_acc")
    ok = not failed and tr.adaptation_rho > 0 and tr.forgetting_rho_upper > 0 and tr.interior_margin >= 1.0
    curve = " ".join(f"{n}:{100 * a:.1f}" for n, a in acc.items())
    record(5, ok, f"adaptation rho {tr.adaptation_rho:+.3f} (need > 0), upper-half forgetting rho "
                  f"{tr.forgetting_rho_upper:+.3f} (need > 0), best interior {tr.best_interior} at "
                  f"{tr.interior_margin:+.2f} pp over endpoints (need >= 1); mean acc % {curve}")


# -- 6 -----------------------------------------------------------------------------


def test_regularizer_effect(toy, backbone, default_sweep):
    data, stream = toy
    _, records = default_sweep
    top = DEFAULT_GRID[-1]
    base = records[(top, 0)]
    method, train = MethodConfig(n_params=top), TrainConfig(reg_kind="ewc")
    lam, scores = select_reg_strength(data, stream, backbone, method, train, CANDIDATES)
    ewc = run_stream(data, stream, backbone, method, replace(train, reg_strength=lam))
    f0, f1 = mean_forgetting(base.acc), mean_forgetting(ewc.acc)
    reduction = (f0 - f1) / f0 if f0 > 0 else 0.0
    acc_ok = ewc.final_acc >= base.final_acc - 0.02

    # SI: zero at the anchor and non-negative anywhere, exactly.
    rng = np.random.default_rng(0)
    si_ok = True
    for _ in range(50):
        params = {"a": Tensor(rng.normal(size=(3, 4)), requires_grad=True), "b": Tensor(rng.normal(size=5))}
        reg = RegState("si", float(rng.uniform(0.01, 100)), 0.1)
        si_begin_task(reg, params)
        reg.omega = {k: rng.normal(size=v.shape) for k, v in params.items()}
        for v in params.values():
            v.data += rng.normal(size=v.shape)
        si_consolidate(reg, params)
        si_ok &= si_penalty(reg, params).item() == 0.0
        moved = {k: Tensor(v.data + rng.normal(scale=10.0, size=v.shape)) for k, v in params.items()}
        si_ok &= si_penalty(reg, moved).item() >= 0.0
    ok = reduction >= 0.2 and acc_ok and si_ok
    record(6, ok, f"n_params {top}: validated lambda {lam:g}; forgetting {100 * f0:.1f} -> {100 * f1:.1f} "
                  f"({100 * reduction:+.0f}% reduction, need >= 20%), accuracy {100 * base.final_acc:.1f}% -> "
                  f"{100 * ewc.final_acc:.1f}% (need >= -2 pp); SI invariants {'hold' if si_ok else 'violated'}")


# -- 7 -----------------------------------------------------------------------------


def test_oracle_ordering(toy, backbone, pool_runs):
    data, stream = toy
    oracle = [run_stream(data, stream, backbone, MethodConfig(strategy="pool", pool_size=10, top_n=3, query="oracle"),
                         TrainConfig(seed=s)) for s in range(3)]
    p_default = float(np.mean([r.p_sim[-1] for r in pool_runs[:3]]))
    p_oracle = float(np.mean([r.p_sim[-1] for r in oracle]))
    record(7, p_oracle <= p_default, f"mean P_sim over 3 seeds: oracle {p_oracle:.2f} vs default {p_default:.2f} "
                                     f"(need oracle <= default)")


# -- 8 -----------------------------------------------------------------------------


def test_head_comparisons(toy, backbone):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        d, c = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        n = int(rng.integers(c, 4 * c + 1))
        labels = np.concatenate([np.arange(c), rng.integers(0, c, size=n - c)]) + 3
        feats = rng.integers(-3, 4, size=(n, d)).astype(float)  # integer grid makes ties common
        head = NMCHead(d).fit(feats, labels)
        queries = rng.integers(-3, 4, size=(7, d)).astype(float)
        classes = sorted(set(labels.tolist()))
        means = {k: feats[labels == k].mean(axis=0) for k in classes}
        expect = [min(classes, key=lambda k: (float(((q - means[k]) ** 2).sum()), k)) for q in queries]
        mismatches += not np.array_equal(head.predict(queries, classes), expect)

    data, stream = toy
    probe = run_stream(data, stream, backbone, MethodConfig(strategy="none"), TrainConfig())
    first = run_stream(data, stream, backbone, MethodConfig(strategy="only_prompt", head="nmc", adapt="first_task"),
                       TrainConfig())
    rows = summary_table([probe, first])
    labels = sorted(r["method"] for r in rows)
    csv_text, _ = emit_report([probe, first])
    distinct = labels == ["linear_probe", "only_prompt+nmc+first_task"] and all(l in csv_text for l in labels)
    ok = mismatches == 0 and probe.complete and first.complete and distinct
    record(8, ok, f"NMC matched brute force on {1000 - mismatches}/1000 cases; report rows {labels} "
                  f"(final acc {100 * probe.final_acc:.1f}% / {100 * first.final_acc:.1f}%, no ordering asserted)")


# -- 9 -----------------------------------------------------------------------------


def test_psim_examples():
    def brute(p):
        p = np.asarray(p, dtype=float)
        proto = p.mean(axis=0)
        return 100 * np.mean([v @ proto / (np.linalg.norm(v) * np.linalg.norm(proto)) for v in p])

    cases = [([[0.3, -1.2, 2.0]] * 4, 100.0), ([[1, 0], [0, 1]], 70.71), ([[1, 0], [1, 0], [0, 1]], 74.54)]
    got = [prompt_similarity(p).value for p, _ in cases]
    ok = all(abs(g - want) <= 0.01 and abs(g - brute(p)) <= 0.01 for g, (p, want) in zip(got, cases))
    record(9, ok, "P_sim " + " / ".join(f"{g:.2f}" for g in got) + " vs 100 / 70.71 / 74.54")


# -- 10 ----------------------------------------------------------------------------


def _files(d):
    return {p: (d / p).read_bytes() for p in sorted(os.listdir(d))}


def test_reproducibility(tmp_path, backbone, cfg):
    conf = tmp_path / "exp.cfg"
    conf.write_text("[method]\nstrategy = pool\n[sweep]\ngrid = 48, 480, 4800\nseeds = 0\n")
    w = tmp_path / "bb.ptw"
    save_backbone(backbone, w)
    checks = {}

    def twice(name, argv_for):
        outs = []
        for i in range(2):
            target = tmp_path / f"{name}{i}"
            assert main(argv_for(target)) == 0, name
            outs.append(target.read_bytes() if target.is_file() else _files(target))
        checks[name] = outs[0] == outs[1]

    twice("gen-data", lambda o: ["gen-data", "--config", str(conf), "--out", str(o)])
    data = tmp_path / "gen-data0"
    common = ["--config", str(conf), "--weights", str(w), "--data", str(data)]
    twice("pretrain", lambda o: ["pretrain", "--config", str(conf), "--out", str(o)])
    checks["pretrain-matches-session"] = (tmp_path / "pretrain0").read_bytes() == w.read_bytes()
    twice("run", lambda o: ["run", *common, "--seed", "3", "--out", str(o)])
    ckp = tmp_path / "split.ckp"
    assert main(["run", *common, "--seed", "3", "--out", str(tmp_path / "part"), "--checkpoint", str(ckp),
                 "--stop-after", "1"]) == 0
    assert main(["run", *common, "--seed", "3", "--out", str(tmp_path / "resumed"), "--resume", str(ckp)]) == 0
    checks["checkpoint/resume"] = _files(tmp_path / "resumed") == _files(tmp_path / "run0")
    twice("sweep", lambda o: ["sweep", *common, "--out", str(o)])
    sweep_files = _files(tmp_path / "sweep0")
    assert main(["sweep", *common, "--jobs", "2", "--out", str(tmp_path / "sweep_jobs")]) == 0
    checks["sweep --jobs 2"] = _files(tmp_path / "sweep_jobs") == sweep_files
    full_ckp = tmp_path / "full.ckp"
    assert main(["run", *common, "--out", str(tmp_path / "withckp"), "--checkpoint", str(full_ckp)]) == 0
    twice("diagnose", lambda o: ["diagnose", *common, "--checkpoint", str(full_ckp), "--out", str(o)])
    twice("report", lambda o: ["report", str(tmp_path / "run0" / "record.json"),
                               str(tmp_path / "sweep0" / "summary.json"), "--out", str(o)])
    bad = [k for k, v in checks.items() if not v]
    record(10, not bad, f"byte-identical: {', '.join(checks)}" if not bad else f"differs: {', '.join(bad)}")
