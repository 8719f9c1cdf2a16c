import csv
import json
import math

import numpy as np
import pytest

from rainmix.cli import main, read_trace, replay_trace
from rainmix.imaging import ImageBuffer, synth_clean
from rainmix.moe import read_checkpoint


def write_trace(path, streams):
    with open(path, "w") as fh:
        fh.write("step,type_id,raw_loss\n")
        for step in range(len(streams[0])):
            fh.writelines(f"{step},{t},{s[step]!r}\n" for t, s in enumerate(streams))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestValidation:
    def test_unknown_command(self, capsys):
        assert main(["bogus"]) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text("counts: 2\ncolour: blue\n")
        assert main(["synth", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")]) == 1
        assert "colour" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_unknown_nested_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("model:\n  depth: 3\n")
        assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")]) == 1

    def test_invalid_value(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text("mode: greedy\n")
        assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")]) == 1
        assert "greedy" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.yaml")]) == 1

    def test_distill_needs_judges(self, tmp_path):
        assert main(["distill", "--out", str(tmp_path)]) == 1

    def test_negative_seed(self, tmp_path):
        assert main(["synth", "--seed", "-1", "--out", str(tmp_path)]) == 1


class TestSynth:
    def test_writes_corpus(self, tmp_path):
        (tmp_path / "c.yaml").write_text("counts: {DRS: 2, NRS: 1}\nsize: 16\n")
        out = tmp_path / "o"
        assert main(["--config", str(tmp_path / "c.yaml"), "synth", "--seed", "7", "--out", str(out)]) == 0
        lines = [json.loads(x) for x in (out / "manifest.jsonl").read_text().splitlines()]
        assert [e["seed"] for e in lines] == [7, 8, 9]
        assert (out / "config.echo").read_text() == (tmp_path / "c.yaml").read_text()
        assert ImageBuffer.load(out / lines[0]["degraded_path"]).shape == (16, 16, 3)


class TestReplay:
    def test_identical_streams_stay_uniform(self, tmp_path):
        s = [1.0 / (1 + 0.1 * i) for i in range(30)]
        write_trace(tmp_path / "t.csv", [s, s, s])
        assert main(["replay", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "log.csv")
        assert list(rows[0]) == ["step", "omega_0", "omega_1", "omega_2", "af"]
        for r in rows:
            assert [float(r[f"omega_{i}"]) for i in range(3)] == pytest.approx([1 / 3] * 3, abs=1e-12)

    def test_decay_rank_order(self, tmp_path):
        rates = [0.008, 0.004, 0.002, 0.001]
        write_trace(tmp_path / "t.csv", [[math.exp(-r * k) for k in range(100)] for r in rates])
        main(["replay", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")])
        rows = read_csv(tmp_path / "o" / "log.csv")[2:]
        for r in rows:
            omega = [float(r[f"omega_{i}"]) for i in range(4)]
            assert omega == sorted(omega)

    def test_divergence_lowers_af(self, tmp_path):
        streams = [[1.0 - 0.002 * k for k in range(80)] for _ in range(3)]
        streams.append([1.0 - 0.002 * k if k < 50 else 0.9 + 0.01 * (k - 50) for k in range(80)])
        write_trace(tmp_path / "t.csv", streams)
        main(["replay", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")])
        af = [float(r["af"]) for r in read_csv(tmp_path / "o" / "log.csv")]
        assert af[49] == pytest.approx(1.0, abs=1e-9)
        assert min(af[50:60]) < af[49]

    def test_missing_entries_carry_forward(self, tmp_path):
        (tmp_path / "t.csv").write_text("0,0,1.0\n0,1,1.0\n1,0,0.9\n2,0,0.8\n2,1,0.95\n")
        result = replay_trace(read_trace(tmp_path / "t.csv"))
        assert [s for s, _, _ in result] == [0, 1, 2]

    @pytest.mark.parametrize("body", ["0,0\n", "0,0,-1\n", "0,0,nan\n", "a,b,c\n"])
    def test_bad_trace(self, tmp_path, body):
        (tmp_path / "t.csv").write_text(body)
        assert main(["replay", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")]) == 1


class TestDistill:
    def test_mock_run_and_determinism(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("k1: 8\nk2: 4\nk3: 2\nsynthetic: {n_references: 12, n_queries: 6}\n")
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["distill", "--config", str(cfg), "--mock-vlm", "ssim:0.15", "--seed", "1", "--out", str(out)]) == 0
            outs.append(out)
        assert (outs[0] / "manifest.jsonl").read_bytes() == (outs[1] / "manifest.jsonl").read_bytes()
        tiers = [json.loads(x)["tier"] for x in (outs[0] / "manifest.jsonl").read_text().splitlines()]
        assert tiers.count("top") == 12 and len(tiers) == 18
        assert len((outs[0] / "audit.jsonl").read_text().splitlines()) == 18
        assert "retention=" in capsys.readouterr().out

    def test_unprocessable_query_exits_2(self, tmp_path):
        from rainmix.distill import make_distill_corpus

        refs, queries = make_distill_corpus(tmp_path / "corp", n_references=6, n_queries=2)
        first = json.loads(queries.read_text().splitlines()[0])
        (tmp_path / "corp" / first["image_path"]).unlink()
        cfg = tmp_path / "c.yaml"
        cfg.write_text(f"references: {refs}\nqueries: {queries}\nk1: 4\nk2: 2\nk3: 1\n")
        assert main(["distill", "--config", str(cfg), "--mock-vlm", "accept", "--out", str(tmp_path / "o")]) == 2
        lines = (tmp_path / "o" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 8


class TestTrainEvalReport:
    def test_train_outputs(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(
            "iterations: 6\neval_interval: 3\nholdout_per_type: 2\n"
            "corpus: {counts: 4, size: 12}\nmodel: {expert_widths: [2, 3, 4, 5]}\n"
        )
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        rows = read_csv(out / "log.csv")
        assert list(rows[0]) == ["iter", "type_id", "loss", "psnr", "omega", "af"]
        assert [int(r["iter"]) for r in rows] == [3] * 4 + [6] * 4
        assert len(read_csv(out / "weights.csv")) == 6
        assert "decoder1.expert3.w2" in read_checkpoint(out / "checkpoint.bin")

        assert main(["report", str(out / "log.csv"), "--out", str(tmp_path / "r")]) == 0
        summary = read_csv(tmp_path / "r" / "summary.csv")
        assert len(summary) == 4
        assert len(read_csv(tmp_path / "r" / "curves.csv")) == 8

    def test_eval(self, tmp_path):
        pred, gt = tmp_path / "pred", tmp_path / "gt"
        pred.mkdir()
        gt.mkdir()
        for i in range(3):
            img = synth_clean(i, 16)
            img.save_png(gt / f"{i}.png")
            ImageBuffer(img.pixels + 0.05 * np.random.default_rng(i).standard_normal(img.shape)).save_png(pred / f"{i}.png")
        assert main(["eval", str(pred), str(gt), "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "metrics.csv")
        assert [r["image"] for r in rows] == ["0.png", "1.png", "2.png", "mean"]
        assert 15 < float(rows[-1]["psnr"]) < 40

    def test_eval_missing_prediction(self, tmp_path):
        (tmp_path / "p").mkdir()
        (tmp_path / "g").mkdir()
        synth_clean(0, 16).save_png(tmp_path / "g" / "x.png")
        assert main(["eval", str(tmp_path / "p"), str(tmp_path / "g"), "--out", str(tmp_path / "o")]) == 1

    def test_report_replay_log(self, tmp_path):
        s = [1.0 / (1 + 0.1 * i) for i in range(12)]
        write_trace(tmp_path / "t.csv", [s, s])
        main(["replay", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")])
        assert main(["report", str(tmp_path / "o" / "log.csv"), "--out", str(tmp_path / "r")]) == 0
        assert len(read_csv(tmp_path / "r" / "summary.csv")) == 2
