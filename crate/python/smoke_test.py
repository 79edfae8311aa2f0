#!/usr/bin/env python3
"""Smoke test for the npql_py extension module.

Builds the cdylib if needed, imports it, and exercises the oracle, the
environment, a tiny training run, and one verification suite.

Usage: python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_module() -> Path:
    so = ROOT / "target" / "release" / "libnpql_py.so"
    if not so.exists():
        subprocess.run(
            ["cargo", "build", "-p", "npql-py", "--release"], cwd=ROOT, check=True
        )
    dest = Path(__file__).resolve().parent / "npql_py.so"
    if not dest.exists() or so.stat().st_mtime > dest.stat().st_mtime:
        shutil.copy2(so, dest)
    return dest


def main() -> int:
    build_module()
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    import npql_py

    # oracle: closed-form policy on a hand-checkable instance
    pi = npql_py.closed_form_policy([0.0, math.log(2.0)], [0.5, 0.5], 1.0)
    assert abs(pi[0] - 1.0 / 3.0) < 1e-12 and abs(pi[1] - 2.0 / 3.0) < 1e-12, pi
    assert npql_py.kl_divergence([1.0, 0.0], [0.5, 0.5]) - math.log(2.0) < 1e-12

    # temperature solve: constant row collapses to the solver floor
    assert npql_py.solve_alpha([0.3, 0.3, 0.3], [0.4, 0.3, 0.3], 1.0) <= 1e-3 + 1e-12

    # tabular fixed point: contraction and feasibility
    mdp = npql_py.TabularRmdp.random(7)
    ratio = mdp.check_contraction(50, 0)
    assert ratio <= mdp.gamma + 1e-9, (ratio, mdp.gamma)
    q_star, policy, iters = mdp.value_iteration(1e-8)
    assert iters > 1 and len(q_star) == mdp.n_states
    tq = mdp.bellman_apply(q_star)
    residual = max(
        abs(tq[s][a] - q_star[s][a])
        for s in range(mdp.n_states)
        for a in range(mdp.n_actions)
    )
    assert residual < 1e-7, residual
    text = mdp.to_json()
    again = npql_py.TabularRmdp.from_json(text)
    assert again.n_states == mdp.n_states

    # environment round trip and expert competence on a few episodes
    env = npql_py.Env("push", seed=3)
    obs = env.reset()
    assert len(obs) == env.obs_dim
    successes = 0
    for _ in range(10):
        env.reset()
        while True:
            vel, grip = env.expert_action()
            obs, reward, done = env.step(vel, grip)
            if done:
                successes += reward > 0.5
                break
    assert successes >= 9, successes

    # tiny end-to-end training run + checkpoint reload
    with tempfile.TemporaryDirectory() as tmp:
        run_dir, final = npql_py.train(
            "",
            [
                f"out_dir={tmp}/run",
                "budget=200",
                "eval_every=100",
                "eval_episodes=2",
                "expert_episodes=2",
                "rollout_steps=50",
                "grad_steps=1",
                "agent.batch_size=8",
                "agent.n_policy=6",
                "agent.n_target=6",
                "agent.head_hidden=8",
            ],
        )
        assert 0.0 <= final <= 1.0
        ckpt = Path(run_dir) / "checkpoint_200.json"
        policy = npql_py.Policy(str(ckpt), seed=1)
        assert policy.algorithm == "ap-npql"
        vel, grip = policy.act(obs)
        assert len(vel) == env.action_dim and isinstance(grip, bool)

    # one fast verification suite
    report = npql_py.run_suite("identity", seed=1)
    assert report["passed"], report["failures"][:3]
    assert "identity" in npql_py.suites()

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
