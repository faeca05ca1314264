import csv
import json

import numpy as np
import pytest

from odformer.cli import main
from odformer.data import generate_synthetic, load_series, write_edge_list
from odformer.training import evaluate


def write_matrix_csv(path, values, missing=()):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timeslot", "origin", "destination", "value"])
        for t in range(values.shape[0]):
            for i in range(values.shape[1]):
                for j in range(values.shape[2]):
                    w.writerow([t, i, j, "" if (t, i, j) in missing else repr(float(values[t, i, j, 0]))])


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    s = generate_synthetic(3, 3, 120, [12], noise=0.2, seed=0)
    write_matrix_csv(d / "m.csv", s.values, missing={(5, 1, 2)})
    write_edge_list(s.origin_graph, d / "g.csv")
    (d / "cfg.json").write_text(json.dumps({
        "input_length": 24, "output_length": 12, "d_model": 8, "d_ff": 16, "max_heads": 2, "d_attn": 4,
        "learning_rate": 0.003, "max_epochs": 3, "batch_size": 8,
    }))
    code = main(["ingest", "--matrix", str(d / "m.csv"), "--origin-graph", str(d / "g.csv"),
                 "--destination-graph", str(d / "g.csv"), "--out", str(d / "ing")])
    assert code == 0
    code = main(["train", "--data", str(d / "ing" / "series"), "--config", str(d / "cfg.json"), "--seed", "7",
                 "--out", str(d / "tr")])
    assert code == 0
    return d


class TestIngest:
    def test_provenance(self, workspace):
        prov = json.loads((workspace / "ing" / "provenance.json").read_text())
        assert prov["clip_percentile"] == 98.0
        assert prov["imputed_cells"] == 1
        assert prov["split"] == {"train": 72, "validation": 24, "test": 24}
        s = load_series(workspace / "ing" / "series")
        assert s.values.shape == (120, 3, 3, 1)
        assert (s.values >= 0).all()
        assert np.expm1(s.values).max() == pytest.approx(prov["clip_threshold"], rel=1e-12)

    def test_trajectory_fixture(self, tmp_path, capsys):
        (tmp_path / "t.csv").write_text(
            "traj_id,timestamp,lon,lat\n"
            "a,0,0.5,0.5\na,100,1.5,0.5\n"
            "b,3600,1.5,0.5\nb,3700,0.5,0.5\nb,3800,2.5,0.5\n"
            "c,7300,2.5,0.5\nc,7400,0.5,0.5\n"
            "d,32400,0.5,0.5\nd,32500,1.5,0.5\n"
        )
        code, out, _ = run(capsys, "ingest", "--trajectories", tmp_path / "t.csv", "--grid", "0,0,3,1,3,1",
                           "--interval", 3600, "--clip-percentile", 99.9, "--out", tmp_path / "o")
        assert code == 0
        prov = json.loads(out)
        assert prov["od_pairs"] == 5 and prov["trajectories"] == 4
        s = load_series(tmp_path / "o" / "series")
        expected = np.zeros((10, 3, 3))
        # slot 0: 0->1, slot 1: 1->0 and 0->2, slot 2: 2->0, slot 9: 0->1
        expected[0, 0, 1] = expected[1, 1, 0] = expected[1, 0, 2] = expected[2, 2, 0] = expected[9, 0, 1] = 1.0
        np.testing.assert_allclose(np.expm1(s.values[..., 0]), expected, atol=1e-12)

    def test_empty_trajectories(self, tmp_path, capsys):
        (tmp_path / "t.csv").write_text("traj_id,timestamp,lon,lat\na,0,0.5,0.5\na,10,0.6,0.5\n")
        code, _, err = run(capsys, "ingest", "--trajectories", tmp_path / "t.csv", "--grid", "0,0,3,1,3,1",
                           "--out", tmp_path / "o")
        assert code == 2 and "no OD pairs" in err

    def test_malformed_row(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("timeslot,origin,destination,value\n0,0,0,1\nx,0,0,1\n")
        code, _, err = run(capsys, "ingest", "--matrix", tmp_path / "m.csv", "--out", tmp_path / "o")
        assert code == 2 and "line 3" in err


class TestTrain:
    def test_report(self, workspace):
        rep = json.loads((workspace / "tr" / "report.json").read_text())
        assert rep["seed"] == 7
        assert rep["train_config"]["learning_rate"] == 0.003
        assert len(rep["history"]["train_loss"]) == 3
        assert rep["test"]["mse"] >= 0 and rep["persistence"]["mse"] >= 0
        assert len(rep["periods"]) == len(rep["test_windows"])

    def test_defaults_echo(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--data", workspace / "ing" / "series", "--max-epochs", 0,
                         "--out", tmp_path)
        assert code == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["train_config"]["learning_rate"] == 1e-4
        assert rep["train_config"]["batch_size"] == 16
        assert rep["train_config"]["early_stop_patience"] == 8

    def test_same_seed_same_report(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--data", workspace / "ing" / "series", "--config", workspace / "cfg.json",
                         "--seed", 7, "--out", tmp_path)
        assert code == 0
        a = json.loads((workspace / "tr" / "report.json").read_text())
        b = json.loads((tmp_path / "report.json").read_text())
        a.pop("timing"), b.pop("timing")
        a["data"].pop("path"), b["data"].pop("path")
        assert a == b
        assert (workspace / "tr" / "model.ckpt").read_bytes() == (tmp_path / "model.ckpt").read_bytes()

    def test_unknown_config_key(self, workspace, capsys, tmp_path):
        (tmp_path / "bad.json").write_text('{"learning_rate": 0.01, "lr": 1}')
        code, _, err = run(capsys, "train", "--data", workspace / "ing" / "series", "--config", tmp_path / "bad.json")
        assert code == 1 and "lr" in err

    def test_config_dimension_mismatch(self, workspace, capsys, tmp_path):
        (tmp_path / "bad.json").write_text('{"n": 5}')
        code, _, _ = run(capsys, "train", "--data", workspace / "ing" / "series", "--config", tmp_path / "bad.json")
        assert code == 1


class TestPredict:
    def test_rows_and_scale(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "predict", "--checkpoint", workspace / "tr" / "model.ckpt",
                         "--data", workspace / "ing" / "series", "--out", tmp_path)
        assert code == 0
        with open(tmp_path / "forecast.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12 * 3 * 3
        assert min(float(r["value"]) for r in rows) >= -1e-9
        assert int(rows[0]["timeslot"]) == 120

    def test_round_trip_matches_report(self, workspace, capsys, tmp_path):
        rep = json.loads((workspace / "tr" / "report.json").read_text())
        s = load_series(workspace / "ing" / "series")
        mses = []
        for start in rep["test_windows"]:
            end = start + 24
            code, _, _ = run(capsys, "predict", "--checkpoint", workspace / "tr" / "model.ckpt",
                             "--data", workspace / "ing" / "series", "--end", end, "--out", tmp_path)
            assert code == 0
            pred = np.zeros((12, 3, 3, 1))
            with open(tmp_path / "forecast.csv") as fh:
                for r in csv.DictReader(fh):
                    pred[int(r["timeslot"]) - end, int(r["origin"]), int(r["destination"]), 0] = float(r["value"])
            mses.append(evaluate(np.log1p(pred), s.values[end:end + 12])[0])
        assert np.mean(mses) == pytest.approx(rep["test"]["mse"], rel=1e-9)

    def test_raw_history_csv(self, workspace, capsys, tmp_path):
        s = load_series(workspace / "ing" / "series")
        write_matrix_csv(tmp_path / "h.csv", np.expm1(s.values[:30]))
        code, out, _ = run(capsys, "predict", "--checkpoint", workspace / "tr" / "model.ckpt",
                           "--history", tmp_path / "h.csv", "--out", tmp_path)
        assert code == 0 and json.loads(out)["first_timeslot"] == 30

    def test_short_history(self, workspace, capsys, tmp_path):
        code, _, err = run(capsys, "predict", "--checkpoint", workspace / "tr" / "model.ckpt",
                           "--data", workspace / "ing" / "series", "--end", 10, "--out", tmp_path)
        assert code == 2 and "input_length" in err

    def test_truncated_checkpoint(self, workspace, capsys, tmp_path):
        blob = (workspace / "tr" / "model.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(blob[:-10])
        code, _, _ = run(capsys, "predict", "--checkpoint", tmp_path / "bad.ckpt",
                         "--data", workspace / "ing" / "series", "--out", tmp_path)
        assert code == 2


class TestPeriods:
    def test_planted(self, workspace, capsys):
        code, out, _ = run(capsys, "periods", "--data", workspace / "ing" / "series", "--max-k", 1)
        assert code == 0
        assert json.loads(out)["periods"] == [12]

    def test_constant(self, tmp_path, capsys):
        write_matrix_csv(tmp_path / "m.csv", np.full((40, 2, 2, 1), 5.0))
        assert main(["ingest", "--matrix", str(tmp_path / "m.csv"), "--out", str(tmp_path / "o")]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, "periods", "--data", tmp_path / "o" / "series", "--out", tmp_path / "p")
        rep = json.loads(out)
        assert code == 0 and rep["status"] == "no periodicity" and rep["periods"] == []
        assert json.loads((tmp_path / "p" / "periods.json").read_text()) == rep

    def test_two_sines(self, tmp_path, capsys):
        t = np.arange(96)
        v = 5 + np.sin(2 * np.pi * t / 24) + np.sin(2 * np.pi * t / 8)
        write_matrix_csv(tmp_path / "m.csv", np.broadcast_to(v[:, None, None, None], (96, 2, 2, 1)))
        assert main(["ingest", "--matrix", str(tmp_path / "m.csv"), "--clip-percentile", "99.99",
                     "--out", str(tmp_path / "o")]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, "periods", "--data", tmp_path / "o" / "series", "--max-k", 2)
        assert code == 0 and set(json.loads(out)["periods"]) == {24, 8}


class TestUsage:
    def test_no_command(self, capsys):
        assert run(capsys, )[0] == 1

    def test_bad_flag(self, capsys):
        assert run(capsys, "bench", "--nope")[0] == 1

    def test_bad_grid(self, capsys, tmp_path):
        assert run(capsys, "bench", "--grid", "12", "--out", tmp_path)[0] == 1

    def test_predict_needs_one_source(self, workspace, capsys):
        assert run(capsys, "predict", "--checkpoint", workspace / "tr" / "model.ckpt")[0] == 1
