"""End-to-end CLI runs in a temp workspace."""

import pytest

from blockrnn import data
from blockrnn.cli import main

CFG = """
model.kind=gru
model.hidden=16
model.layers=1
data.path={corpus}
train.epochs=5
train.lr=0.5
train.momentum=0.9
train.batch=8
train.seq_len=32
train.seed=4
prune.enabled=true
prune.freq=10
prune.target_sparsity=0.9
block.h=4
block.w=4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    corpus.write_bytes(data.synth_corpus(60_000, seed=13))
    cfg = root / "train.cfg"
    cfg.write_text(CFG.format(corpus=corpus))
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    ck = workspace / "model.bsnn"
    report = workspace / "report.csv"
    rc = main(["train", str(workspace / "train.cfg"),
               "--checkpoint", str(ck), "--out", str(report)])
    assert rc == 0
    return ck, report


class TestTrainEval:
    def test_train_outputs_exist(self, trained):
        ck, report = trained
        assert ck.exists() and report.exists()
        header = report.read_text().splitlines()[0]
        assert header.startswith("iteration,loss,epsilon_recurrent")

    def test_eval_both_kernels_agree(self, workspace, trained):
        ck, _ = trained
        out_d = workspace / "eval_dense.csv"
        out_b = workspace / "eval_bsr.csv"
        corpus = workspace / "corpus.txt"
        assert main(["eval", str(ck), str(corpus), "--out", str(out_d),
                     "--batch", "8", "--seq-len", "32"]) == 0
        assert main(["eval", str(ck), str(corpus), "--out", str(out_b),
                     "--kernel", "bsr", "--batch", "8", "--seq-len", "32"]) == 0
        d = float(out_d.read_text().splitlines()[1].split(",")[0])
        b = float(out_b.read_text().splitlines()[1].split(",")[0])
        assert abs(d - b) <= 1e-6 * max(abs(d), 1.0)


class TestPruneSchedule:
    def test_curve_monotone(self, workspace):
        cfg = workspace / "sched.cfg"
        cfg.write_text(CFG.format(corpus=workspace / "corpus.txt") + "prune.q=0.1\n")
        out = workspace / "sched.csv"
        assert main(["prune-schedule", str(cfg), "--out", str(out)]) == 0
        rows = out.read_text().strip().splitlines()[1:]
        eps = [float(r.split(",")[1]) for r in rows]
        assert eps == sorted(eps)
        assert eps[0] == 0.0 and eps[-1] > 0.0
        # frozen tail beyond the end iteration
        assert eps[-1] == eps[-5]

    def test_needs_q_or_theta(self, workspace, capsys):
        cfg = workspace / "noq.cfg"
        cfg.write_text(CFG.format(corpus=workspace / "corpus.txt"))
        rc = main(["prune-schedule", str(cfg), "--out",
                   str(workspace / "x.csv")])
        assert rc == 1
        assert "prune.q" in capsys.readouterr().err


class TestBenchCli:
    def test_bench_csv(self, workspace):
        out = workspace / "bench.csv"
        rc = main(["bench", "--rows", "32", "--cols", "32", "--sparsity", "0.8",
                   "--blocks", "4x4", "--batches", "1,2", "--reps", "3",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) > 1


class TestReports:
    def test_fanout_layers_curve(self, workspace, trained):
        ck, report = trained
        for what, src in [("fanout", ck), ("layers", ck), ("curve", report)]:
            out = workspace / f"{what}.csv"
            assert main(["report", what, str(src), "--out", str(out)]) == 0
            assert out.read_text().count("\n") >= 1

    def test_corrupt_checkpoint_fails_cleanly(self, workspace, capsys):
        bad = workspace / "bad.bsnn"
        bad.write_bytes(b"garbage")
        rc = main(["report", "fanout", str(bad), "--out",
                   str(workspace / "y.csv")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestSweepCli:
    def test_sweep_rows(self, workspace):
        grid = workspace / "grid.txt"
        grid.write_text("train.seed=5\ntrain.seed=6 block.h=1 block.w=1\n")
        out = workspace / "sweep.csv"
        assert main(["sweep", str(workspace / "train.cfg"), str(grid),
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3


def test_unknown_args_exit_nonzero():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
