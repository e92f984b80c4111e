"""Exercise the more_py extension end to end on a tiny configuration.

Build first:  maturin develop -m crates/py/Cargo.toml --release
Run:          python python/smoke_test.py
"""

import json
import tempfile

import more_py

TINY = """
format_version = 1

[train.policy]
d_f = 8
d_z = 16
scan_hidden = [16]
history_hidden = [16]
trunk_hidden = [16]
expert_hidden = [8]
gate_hidden = [8]
critic_hidden = [16]

[train.ppo]
n_envs = 2
horizon = 16
epochs = 1
minibatches = 2

[train.curriculum]
terrains = ["flat"]

[amp]
batch_size = 16
warmup_updates = 2
warmup_rollouts = 1

[bench]
timeout = 2.0

[[bench.suite]]
obstacle = "gap"
mode = "easy"
trials = 2
seed_base = 0
"""


def main():
    cfg = more_py.RunConfig.from_toml(TINY)
    assert len(cfg.hash()) == 64
    assert "format_version = 1" in cfg.to_toml()

    env = more_py.Env(cfg)
    obs = env.reset("flat", 0.0, 0.5, 0, 1)
    policy = more_py.Policy.random(cfg, 0)
    steps = 0
    for _ in range(50):
        action = policy.act(obs)
        assert len(action) == 6
        obs, reward, termination, done = env.step(action)
        steps += 1
        if done:
            break
    print(f"env: {steps} steps, distance {env.distance():.3f}, last termination {termination}")

    trainer = more_py.Trainer.stage1(cfg, 3)
    m1 = json.loads(trainer.iterate())
    m2 = json.loads(trainer.iterate())
    assert m2["iteration"] == m1["iteration"] + 1
    again = more_py.Trainer.stage1(cfg, 3)
    assert json.loads(again.iterate()) == m1, "same seed must reproduce metrics"

    stage2 = more_py.Trainer.stage2(cfg, trainer.policy(), 3)
    json.loads(stage2.iterate())
    assert stage2.policy().has_residual

    with tempfile.TemporaryDirectory() as d:
        stage2.policy().save(d)
        loaded = more_py.Policy.load(d)
        obs = env.reset("flat", 0.0, 0.5, 1, 2)
        assert loaded.act(obs) == stage2.policy().act(obs)

    report = json.loads(more_py.run_benchmark(loaded, cfg, 0))
    cell = report["cells"][0]
    assert cell["trials"] == 2 and 0.0 <= cell["succ"] <= 1.0
    print(f"bench: succ {cell['succ']:.2f} dist {cell['dist']:.2f}")

    clip = json.loads(more_py.reference_clip("squat", 0))
    assert clip["frames"]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
