import csv
import json

import numpy as np
import pytest

from jointprune import config as run_config
from jointprune.cli import main
from jointprune.cost import flops
from jointprune.net import desk_space

TINY = """\
[meta]
schema_version = 1

[space]
preset = desk
widths = 6,6,6,6
spatial_max = 8

[constraint]
metric = flops
target_fraction = 0.5
rho = auto
unit = 1e3

[optimizer]
outer_iterations = 3
weight_iterations = 2
samples = 4
vector_updates_per_outer = 2
sigma_initial = 0.1
sigma_final = 0.05
alpha_initial = 0.01
alpha_final = 0.0
eval_subset = 16
batch_size = 8
seed = 1

[data]
classes = 10
samples_per_class = 12

[output]
dir = {out}
"""


def write_config(tmp_path, text=None, name="run.ini", out="out"):
    path = tmp_path / name
    path.write_text((text or TINY).format(out=out))
    return str(path)


def drop_section(text, name):
    lines, skip = [], False
    for line in text.splitlines():
        if line.startswith("["):
            skip = line.strip() == f"[{name}]"
        if not skip:
            lines.append(line)
    return "\n".join(lines) + "\n"


@pytest.fixture
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    path = write_config(tmp)
    assert main(["optimize", "--config", path]) == 0
    return tmp / "out"


class TestConfigFile:
    def test_round_trip_via_ini(self, tmp_path):
        cfg = run_config.load(write_config(tmp_path))
        again = run_config.loads(cfg.to_ini())
        assert again.optimizer == cfg.optimizer
        assert again.constraint == cfg.constraint

    def test_paths_relative_to_file(self, tmp_path):
        cfg = run_config.load(write_config(tmp_path))
        assert cfg.trace_path.startswith(str(tmp_path))

    @pytest.mark.parametrize("section", ["constraint", "space", "optimizer", "output"])
    def test_missing_section(self, section):
        with pytest.raises(run_config.ConfigError) as err:
            run_config.loads(drop_section(TINY.format(out="o"), section))
        assert err.value.key == section

    @pytest.mark.parametrize("edit,key", [
        (("samples = 4", "sampels = 4"), "optimizer.sampels"),
        (("samples = 4", "samples = 0"), "optimizer.samples"),
        (("metric = flops", "metric = area"), "constraint.metric"),
        (("rho = auto", "rho = lots"), "constraint.rho"),
        (("target_fraction = 0.5", "target_fraction = 0.5\ntarget = 100"), "constraint.target"),
        (("metric = flops", "metric = latency"), "constraint.lut"),
        (("schema_version = 1", "schema_version = 9"), "meta.schema_version"),
        (("[data]", "[extras]"), "extras"),
        (("momentum = 0.9", ""), None),
    ])
    def test_rejections_name_key(self, edit, key):
        text = TINY.format(out="o").replace(*edit)
        if key is None:
            run_config.loads(text)
            return
        with pytest.raises(run_config.ConfigError) as err:
            run_config.loads(text)
        assert err.value.key == key
        assert key in str(err.value)

    def test_explicit_layers(self):
        text = TINY.format(out="o").replace("preset = desk\nwidths = 6,6,6,6", (
            "preset = none\n"
            "layers = kind=conv out=8 stride=2 block=0; kind=conv out=8 block=1; "
            "kind=dense out=10 min=10 relu=no block=2\n"
            "droppable = 1"))
        space = run_config.build_space(run_config.loads(text))
        assert space.num_layers == 3 and space.droppable_blocks == (1,)

    def test_bad_layer_field(self):
        text = TINY.format(out="o").replace("preset = desk", "preset = none\nlayers = kind=conv out=8 wings=2")
        with pytest.raises(run_config.ConfigError, match="wings"):
            run_config.loads(text)


class TestOptimizeCommand:
    def test_artifacts(self, finished_run):
        assert (finished_run / "trace.jsonl").exists()
        assert (finished_run / "architecture.json").exists()
        assert (finished_run / "checkpoint" / "store.bin").exists()
        arch = json.loads((finished_run / "architecture.json").read_text())
        assert set(arch) >= {"out_channels", "spatial", "depth", "cost", "metric"}

    def test_rerun_byte_identical(self, tmp_path, finished_run):
        assert main(["optimize", "--config", write_config(tmp_path)]) == 0
        assert (tmp_path / "out" / "trace.jsonl").read_bytes() == (finished_run / "trace.jsonl").read_bytes()

    def test_missing_constraint_exit_1(self, tmp_path, capsys):
        path = write_config(tmp_path, drop_section(TINY, "constraint"))
        assert main(["optimize", "--config", path]) == 1
        assert "constraint" in capsys.readouterr().err

    def test_resume_matches(self, tmp_path, finished_run):
        path = write_config(tmp_path)
        cfg = run_config.load(path)
        from jointprune.experiment import build
        from jointprune.optimizer import run
        setup = build(cfg)
        run(setup.optimizer, setup.evaluator(), np.ones(setup.space.dim), setup.space,
            trace_path=cfg.trace_path, checkpoint_dir=cfg.checkpoint_dir, stop_after=2,
            extra_state={"run_config": cfg.to_ini(), "constraint": {}})
        assert main(["optimize", "--config", path, "--resume"]) == 0
        assert (tmp_path / "out" / "trace.jsonl").read_bytes() == (finished_run / "trace.jsonl").read_bytes()

    def test_runtime_failure_exit_2(self, tmp_path, monkeypatch):
        import jointprune.optimizer as opt

        def boom(*a, **k):
            raise FloatingPointError("injected")

        monkeypatch.setattr(opt, "estimate_gradient", boom)
        assert main(["optimize", "--config", write_config(tmp_path)]) == 2


class TestEvaluateCommand:
    def evaluate(self, capsys, *args):
        assert main(["evaluate", *args]) == 0
        return json.loads(capsys.readouterr().out)

    def test_maximal_cost(self, finished_run, capsys):
        space = desk_space(widths=(6, 6, 6, 6), spatial_max=8)
        report = self.evaluate(capsys, "--checkpoint", str(finished_run / "checkpoint"),
                               "--vector", ",".join(["1"] * space.dim))
        assert report["cost"] == flops(space.maximal_config(), space)

    def test_matches_last_record(self, finished_run, capsys):
        last = [json.loads(line) for line in (finished_run / "trace.jsonl").read_text().splitlines()][-1]
        report = self.evaluate(capsys, "--checkpoint", str(finished_run / "checkpoint"),
                               "--vector", ",".join(repr(x) for x in last["mu"]))
        assert report["architecture"] == last["config"]
        assert abs(report["loss"] - last["loss"]) < 1e-9
        assert abs(report["penalized_error"] - last["error"]) < 1e-9

    def test_rho_zero(self, finished_run, capsys):
        config = json.dumps({"out_channels": [4, 4, 4, 4, 10], "spatial": 6, "depth": 2})
        report = self.evaluate(capsys, "--checkpoint", str(finished_run / "checkpoint"), "--config", config,
                               "--rho", "0")
        assert report["penalized_error"] == report["loss"]

    def test_shape_mismatch(self, finished_run, capsys):
        assert main(["evaluate", "--checkpoint", str(finished_run / "checkpoint"), "--vector", "1,1"]) == 1
        assert "entries" in capsys.readouterr().err


class TestReportCommand:
    def read(self, path):
        with open(path, newline="") as fh:
            return list(csv.reader(fh))

    def test_row_counts(self, finished_run, tmp_path):
        assert main(["report", "--trace", str(finished_run / "trace.jsonl"), "--out", str(tmp_path)]) == 0
        for name in ("pruning_ratio.csv", "cost.csv", "k_bound.csv"):
            assert len(self.read(tmp_path / name)) == 1 + 3
        assert len(self.read(tmp_path / "architecture.csv")) == 1 + 7

    def test_constant_mu(self, tmp_path):
        from jointprune.optimizer import TraceRecord
        lines = [TraceRecord(t, [0.5] * 4, 0.1, 0.0, [], 0.0, 0.0, None, 1.0, 1.0, 1.0).to_json() for t in range(4)]
        trace = tmp_path / "t.jsonl"
        trace.write_text("\n".join(lines) + "\n")
        assert main(["report", "--trace", str(trace), "--out", str(tmp_path / "r")]) == 0
        rows = self.read(tmp_path / "r" / "pruning_ratio.csv")[1:]
        assert len(rows) == 4
        assert all(row[1:] == ["0.5"] * 4 for row in rows)

    def test_single_record(self, finished_run, tmp_path):
        lines = (finished_run / "trace.jsonl").read_text().splitlines()
        trace = tmp_path / "one.jsonl"
        trace.write_text(lines[0] + "\n")
        assert main(["report", "--trace", str(trace), "--out", str(tmp_path / "r")]) == 0
        assert len(self.read(tmp_path / "r" / "pruning_ratio.csv")) == 2

    def test_truncated_warns(self, finished_run, tmp_path, capsys):
        text = (finished_run / "trace.jsonl").read_text()
        trace = tmp_path / "cut.jsonl"
        trace.write_text(text[: len(text) - 40])
        assert main(["report", "--trace", str(trace), "--out", str(tmp_path / "r")]) == 0
        assert "truncated" in capsys.readouterr().err
        assert len(self.read(tmp_path / "r" / "cost.csv")) == 1 + 2


LUT_HEADER = "layer_id,in_channels,out_channels,spatial_in,latency_us\n"


class TestLutCommand:
    def test_complete(self, tmp_path, capsys):
        path = tmp_path / "lut.csv"
        path.write_text(LUT_HEADER + "0,1,2,4,10.0\n0,1,4,4,20.0\n")
        assert main(["lut", "validate", "--in", str(path)]) == 0
        assert "2 rows, 0 gaps" in capsys.readouterr().out

    def test_duplicate(self, tmp_path, capsys):
        path = tmp_path / "lut.csv"
        path.write_text(LUT_HEADER + "0,1,2,4,10.0\n0,1,2,4,11.0\n")
        assert main(["lut", "validate", "--in", str(path)]) == 1
        err = capsys.readouterr().err
        assert "line 3" in err and "(0, 1, 2, 4)" in err

    def test_fill_then_validate(self, tmp_path, capsys):
        path, out = tmp_path / "lut.csv", tmp_path / "filled.csv"
        path.write_text(LUT_HEADER + "0,1,2,4,10.0\n0,1,4,4,20.0\n0,1,2,8,30.0\n0,1,4,8,40.0\n0,1,3,8,35.0\n")
        assert main(["lut", "validate", "--in", str(path)]) == 0
        assert "1 gaps" in capsys.readouterr().out
        assert main(["lut", "fill", "--in", str(path), "--out", str(out)]) == 0
        assert main(["lut", "validate", "--in", str(out)]) == 0
        assert "6 rows, 0 gaps" in capsys.readouterr().out

    def test_missing_file(self, tmp_path):
        assert main(["lut", "validate", "--in", str(tmp_path / "nope.csv")]) == 1
