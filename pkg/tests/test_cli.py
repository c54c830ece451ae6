import json

import httpx
import pytest

import lesionsynth.captions as captions
from lesionsynth.cli import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, build_parser, dispatch, parse_config_file, resolve_args
from lesionsynth.data import load_manifest, save_manifest
from lesionsynth.metrics import read_report


def _arg_ns(argv):
    return resolve_args(build_parser(), argv)


class TestUsage:
    def test_help(self, capsys):
        assert dispatch(["--help"]) == EXIT_OK
        assert "finetune" in capsys.readouterr().out

    def test_subcommand_help(self, capsys):
        assert dispatch(["generate", "--help"]) == EXIT_OK
        assert "--guidance" in capsys.readouterr().out

    def test_unknown_command(self):
        assert dispatch(["transmogrify"]) == EXIT_USAGE

    def test_missing_required(self, capsys):
        assert dispatch(["train-cls"]) == EXIT_USAGE
        assert "--real" in capsys.readouterr().err

    def test_bad_type(self):
        assert dispatch(["generate", "--steps", "many"]) == EXIT_USAGE

    def test_generate_zero_steps(self, tmp_path, capsys):
        code = dispatch(["generate", "--checkpoint", str(tmp_path), "--class", "melanoma", "--count", "1", "--steps", "0", "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION
        err = capsys.readouterr().err
        assert "steps must be >= 1" in err and len(err.strip().splitlines()) == 1

    def test_missing_manifest(self, tmp_path, capsys):
        assert dispatch(["train-cls", "--real", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_VALIDATION
        assert "error" in capsys.readouterr().err

    def test_count_class_mismatch(self, tmp_path, capsys):
        code = dispatch(["generate", "--checkpoint", str(tmp_path), "--class", "melanoma", "--class", "nevus", "--count", "1", "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION


class TestConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nepochs = 3\nlr=0.5  # inline\nmanifest = data/m.json\nno-augment = true\n")
        assert parse_config_file(p) == {"epochs": 3, "lr": 0.5, "manifest": "data/m.json", "no_augment": True}

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs = 3\nlr = 0.5\nmanifest = m.json\n")
        a = _arg_ns(["finetune", "--config", str(p), "--lr", "0.25"])
        assert a.epochs == 3 and a.lr == 0.25 and a.manifest == "m.json"
        assert a.batch_size == 4 and a.seed == 0
        b = _arg_ns(["finetune", "--manifest", "x.json"])
        assert b.epochs == 100 and b.lr == 1e-4 and b.resolution == 256

    def test_flag_equal_to_default_still_wins(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs = 3\nmanifest = m.json\n")
        assert _arg_ns(["finetune", "--config", str(p), "--epochs", "100"]).epochs == 100

    def test_unknown_key(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("warp = 9\n")
        assert dispatch(["finetune", "--config", str(p)]) == EXIT_VALIDATION
        assert "warp" in capsys.readouterr().err

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("just words\n")
        assert dispatch(["report", "x.json", "--config", str(p)]) == EXIT_VALIDATION

    def test_class_list_from_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text('class = ["melanoma", "nevus"]\ncount = [1, 2]\ncheckpoint = ck\n')
        a = _arg_ns(["generate", "--config", str(p)])
        assert a.klass == ["melanoma", "nevus"] and a.count == [1, 2]


def _good_caption(request: httpx.Request) -> httpx.Response:
    text = json.loads(request.content)["messages"][0]["content"][0]["text"]
    cat = "melanoma" if "melanoma" in text else "nevus"
    body = {"choices": [{"message": {"content": captions.build_generation_prompt(cat) + ", irregular brown border"}}]}
    return httpx.Response(200, json=body)


class TestEnrich:
    def _patch(self, monkeypatch, handler):
        class Mocked(captions.CaptionClient):
            def __post_init__(self):
                self.transport = httpx.MockTransport(handler)
                super().__post_init__()

        monkeypatch.setattr(captions, "CaptionClient", Mocked)

    def test_writes_captions(self, toy_manifest, tmp_path, monkeypatch):
        self._patch(monkeypatch, _good_caption)
        code = dispatch(["enrich", "--manifest", str(toy_manifest.root / "manifest.json"), "--out", str(tmp_path)])
        assert code == EXIT_OK
        m = load_manifest(tmp_path / "manifest.json")
        assert len(m) == len(toy_manifest)
        assert all(r.caption.endswith("irregular brown border") for r in m.records)
        assert m.load_sample(0).rgb.shape == (32, 32, 3)

    def test_failure_and_fallback(self, toy_manifest, tmp_path, monkeypatch, capsys):
        self._patch(monkeypatch, lambda r: httpx.Response(401))
        args = ["enrich", "--manifest", str(toy_manifest.root / "manifest.json"), "--out", str(tmp_path)]
        assert dispatch(args) == EXIT_VALIDATION
        assert "--fallback-template" in capsys.readouterr().err
        assert dispatch(args + ["--fallback-template"]) == EXIT_OK
        m = load_manifest(tmp_path / "manifest.json")
        assert {r.caption for r in m.records} == {captions.build_generation_prompt(c) for c in ("melanoma", "nevus")}


@pytest.mark.slow
def test_end_to_end_pipeline(toy_manifest, synth_manifest, tmp_path, capsys):
    real = str(toy_manifest.root / "manifest.json")
    synth = str(synth_manifest.root / "manifest.json")
    ft = tmp_path / "ft"
    code = dispatch([
        "finetune", "--manifest", real, "--out", str(ft), "--epochs", "1", "--resolution", "32",
        "--pretrain-ae-steps", "2", "--pretrain-denoiser-steps", "2", "--no-augment",
    ])
    assert code == EXIT_OK
    stamp = json.loads((ft / "runstamp.json").read_text())
    assert stamp["command"] == "finetune" and stamp["inputs"]["manifest"]["sha256"]
    ckpts = sorted(ft.glob("checkpoint-epoch*"))
    assert ckpts and ckpts[-1].name == "checkpoint-epoch0001"

    gen = tmp_path / "gen"
    code = dispatch([
        "generate", "--checkpoint", str(ckpts[-1]), "--class", "melanoma", "--count", "3", "--class", "nevus",
        "--count", "3", "--steps", "2", "--resolution", "32", "--out", str(gen),
    ])
    assert code == EXIT_OK
    gm = load_manifest(gen / "manifest.json")
    assert len(gm) == 6 and (gen / "runstamp.json").is_file()

    ev = tmp_path / "ev"
    half = len(toy_manifest) // 2
    tr, te = tmp_path / "tr.json", tmp_path / "te.json"
    save_manifest(toy_manifest.subset(range(half)), tr)
    save_manifest(toy_manifest.subset(range(half, len(toy_manifest))), te)
    code = dispatch([
        "evaluate-gen", "--real-train", str(tr), "--real-test", str(te), "--synth", str(gen / "manifest.json"),
        "--ms-ssim-scales", "1", "--max-pairs", "8", "--out", str(ev),
    ])
    assert code == EXIT_OK
    t1 = read_report(ev / "table1.json")
    assert [r["Data for calculations"] for r in t1.rows] == ["Real Train vs Real Test", "Real Train vs Synth Train"]

    small = ["--folds", "2", "--epochs", "1", "--input-size", "32", "--no-augment"]
    cls = tmp_path / "cls"
    assert dispatch(["train-cls", "--real", real, "--synth", synth, "--out", str(cls), *small]) == EXIT_OK
    t2 = read_report(cls / "table2_cls.json")
    assert [r["Train Dataset"] for r in t2.rows] == ["Real only", "Synth only", "50%Real+50%Synth"]
    assert len(list((cls / "models").rglob("fold*.pt"))) == 6

    seg = tmp_path / "seg"
    assert dispatch(["train-seg", "--real", real, "--condition", "real", "--out", str(seg), *small, "--batch-size", "8"]) == EXIT_OK
    assert read_report(seg / "table2_seg.json").rows[0]["Models"] == "tiny-unet"

    rob = tmp_path / "rob"
    assert dispatch(["eval-robust", "--models", str(cls), "--external", synth, "--out", str(rob)]) == EXIT_OK
    t3 = read_report(rob / "table3_cls.json")
    assert [r["Dataset"] for r in t3.rows] == ["Real", "Synth", "Hybrid"]

    rep = tmp_path / "rep"
    capsys.readouterr()
    assert dispatch(["report", str(cls / "table2_cls.json"), str(cls / "table2_cls.json"), "--baseline", "Real only", "--out", str(rep)]) == EXIT_OK
    text = (rep / "report.md").read_text()
    assert "Deltas vs Real only" in text and "+0.000" in text
    assert "| Models |" in capsys.readouterr().out


def test_eval_robust_missing_models(tmp_path, toy_manifest, capsys):
    code = dispatch(["eval-robust", "--models", str(tmp_path), "--external", str(toy_manifest.root / "manifest.json"), "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert "train-cls" in capsys.readouterr().err
