"""Config schema tests and CLI end-to-end flows on a tiny corpus."""

import json

import numpy as np
import pytest

from quasiparse.cli import main
from quasiparse.config import load_run_config
from quasiparse.corpus import load_corpus
from quasiparse.errors import ConfigurationError
from quasiparse.model import ConvSpec


class TestConfigDefaults:
    def test_defaults_without_file(self):
        cfg = load_run_config()
        assert cfg.get("mcnn", "layers") == 4
        assert cfg.get("pipeline", "knn") == 9
        assert cfg.get("train", "max_epochs") == 30
        assert cfg.get("retrieval", "extractor") == "downsample"

    def test_file_values_apply(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[train]\nmax_epochs = 5\ninitial_lr = 0.01\n")
        cfg = load_run_config(ini)
        assert cfg.get("train", "max_epochs") == 5
        assert cfg.get("train", "initial_lr") == pytest.approx(0.01)
        # untouched keys keep their defaults
        assert cfg.get("train", "batch_size") == 32

    def test_set_overrides_beat_file(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[train]\nmax_epochs = 5\n")
        cfg = load_run_config(ini, ["train.max_epochs=7"])
        assert cfg.get("train", "max_epochs") == 7

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_run_config(tmp_path / "absent.ini")

    def test_unknown_section_named(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[bogus]\nkey = 1\n")
        with pytest.raises(ConfigurationError, match=r"\[bogus\]"):
            load_run_config(ini)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigurationError, match=r"'warp_speed'.*\[train\]"):
            load_run_config(None, ["train.warp_speed=9"])

    def test_bad_value_reports_section_key_and_text(self):
        with pytest.raises(ConfigurationError, match=r"\[train\] max_epochs: 'many'"):
            load_run_config(None, ["train.max_epochs=many"])

    def test_malformed_overrides_rejected(self):
        with pytest.raises(ConfigurationError, match="section.key=value"):
            load_run_config(None, ["train.max_epochs"])
        with pytest.raises(ConfigurationError, match="section.key=value"):
            load_run_config(None, ["max_epochs=3"])

    def test_bool_parsing(self):
        cfg = load_run_config(None, ["train.augment=off"])
        assert cfg.get("train", "augment") is False
        cfg = load_run_config(None, ["train.augment=YES"])
        assert cfg.get("train", "augment") is True
        with pytest.raises(ConfigurationError):
            load_run_config(None, ["train.augment=maybe"])


class TestConfigBuilders:
    def test_mcnn_defaults_broadcast(self):
        cfg = load_run_config()
        mc = cfg.mcnn_config(input_hw=(64, 64))
        assert mc.n_layers == 4
        assert all(spec == ConvSpec(16, 16, 5, 2, 2) for spec in mc.conv_layers)
        assert mc.cross_enabled == frozenset({2, 3, 4})
        assert mc.fc_dims == (128, 64)

    def test_per_layer_values(self):
        cfg = load_run_config(
            None,
            ["mcnn.layers=2", "mcnn.kernel=5,3", "mcnn.single_maps=8,4",
             "mcnn.cross_layers=2", "mcnn.padding=2,1"],
        )
        mc = cfg.mcnn_config(input_hw=(32, 32))
        assert mc.conv_layers[0].kernel == 5 and mc.conv_layers[1].kernel == 3
        assert mc.conv_layers[0].single_maps == 8 and mc.conv_layers[1].single_maps == 4

    def test_wrong_per_layer_count(self):
        cfg = load_run_config(None, ["mcnn.kernel=5,3"])
        with pytest.raises(ConfigurationError, match="1 or 4"):
            cfg.mcnn_config(input_hw=(64, 64))

    def test_input_required_without_corpus(self):
        cfg = load_run_config()
        with pytest.raises(ConfigurationError, match="input"):
            cfg.mcnn_config()

    def test_input_mismatch_with_corpus(self):
        cfg = load_run_config(None, ["mcnn.input=48"])
        with pytest.raises(ConfigurationError, match="disagrees"):
            cfg.mcnn_config(input_hw=(64, 64))

    def test_train_config_builder(self):
        cfg = load_run_config(None, ["train.batch_size=8", "train.momentum=0.5"])
        tc = cfg.train_config()
        assert tc.batch_size == 8
        assert tc.momentum == pytest.approx(0.5)

    def test_synth_label_override(self):
        cfg = load_run_config(None, ["label:scarf.presence=1.0"])
        spec = cfg.synth_spec()
        scarf = next(l for l in spec.labels if l.name == "scarf")
        assert scarf.presence == pytest.approx(1.0)

    def test_synth_label_subset_and_unknown(self):
        cfg = load_run_config(None, ["synth.labels=legs,face"])
        spec = cfg.synth_spec()
        assert [l.name for l in spec.labels] == ["legs", "face"]
        bad = load_run_config(None, ["synth.labels=legs", "label:face.presence=1.0"])
        with pytest.raises(ConfigurationError, match="not in the synth label list"):
            bad.synth_spec()

    def test_new_label_needs_geometry(self):
        cfg = load_run_config(
            None, ["synth.labels=legs,belt", "label:belt.presence=0.5"]
        )
        with pytest.raises(ConfigurationError, match=r"\[label:belt\].*shape"):
            cfg.synth_spec()

    def test_new_label_fully_specified(self):
        cfg = load_run_config(
            None,
            ["synth.labels=legs,belt", "label:belt.shape=rect",
             "label:belt.anchor=0.0,0.5", "label:belt.size=0.3,0.05",
             "label:belt.color=120,80,30"],
        )
        spec = cfg.synth_spec()
        belt = next(l for l in spec.labels if l.name == "belt")
        assert belt.shape == "rect" and belt.color == (120, 80, 30)

    def test_pipeline_options_keys(self):
        opts = load_run_config(None, ["pipeline.knn=5"]).pipeline_options()
        assert opts["k"] == 5
        assert set(opts) == {
            "k", "visibility_threshold", "foreground_threshold",
            "erosion_size", "gradient_weight", "superpixel_count",
            "use_superpixels",
        }


TINY_SETS = [
    "--set", "synth.image=24", "--set", "synth.train=6",
    "--set", "synth.val=0", "--set", "synth.test=2",
]
TINY_NET = [
    "--set", "mcnn.layers=2", "--set", "mcnn.single_maps=4",
    "--set", "mcnn.cross_maps=4", "--set", "mcnn.cross_layers=2",
    "--set", "mcnn.fc_dims=16",
]
TINY_TRAIN = [
    "--set", "train.max_epochs=1", "--set", "train.k_train=2",
    "--set", "train.augment=off", "--set", "train.batch_size=16",
]
TINY_PIPE = [
    "--set", "pipeline.erosion_size=2", "--set", "pipeline.superpixel_count=24",
    "--set", "pipeline.visibility_threshold=0.5", "--set", "pipeline.knn=3",
]


@pytest.fixture(scope="module")
def cli_dirs(tmp_path_factory):
    """One gen-data + train + parse chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus_dir = root / "corpus"
    train_dir = root / "run"
    parse_dir = root / "parsed"
    rc = main(["gen-data", "--out", str(corpus_dir)] + TINY_SETS)
    assert rc == 0
    rc = main(
        ["train", "--corpus", str(corpus_dir), "--out", str(train_dir)]
        + TINY_NET + TINY_TRAIN
    )
    assert rc == 0
    rc = main(
        ["parse", "--corpus", str(corpus_dir),
         "--checkpoint", str(train_dir / "checkpoint.mcnn"),
         "--out", str(parse_dir), "--split", "test", "-K", "3", "--threads", "1"]
        + TINY_PIPE
    )
    assert rc == 0
    return {"corpus": corpus_dir, "train": train_dir, "parse": parse_dir}


class TestCliFlow:
    def test_gen_data_outputs(self, cli_dirs):
        corpus_dir = cli_dirs["corpus"]
        assert (corpus_dir / "manifest.json").is_file()
        assert (corpus_dir / "gen_summary.json").is_file()
        corpus = load_corpus(corpus_dir)
        assert len(corpus.splits["train"]) == 6
        assert len(corpus.splits["test"]) == 2
        assert corpus.image_hw == (24, 24)

    def test_train_outputs(self, cli_dirs):
        train_dir = cli_dirs["train"]
        assert (train_dir / "checkpoint.mcnn").is_file()
        assert (train_dir / "training_log.csv").is_file()
        assert (train_dir / "training_curves.png").is_file()
        summary = json.loads((train_dir / "train_summary.json").read_text())
        assert summary["epochs"] == 1
        assert np.isfinite(summary["final_train_loss"])

    def test_parse_outputs(self, cli_dirs):
        corpus = load_corpus(cli_dirs["corpus"])
        parse_dir = cli_dirs["parse"]
        for eid in corpus.splits["test"]:
            assert (parse_dir / f"{eid}_labels.png").is_file()
            assert (parse_dir / f"{eid}_viz.png").is_file()
            match = json.loads((parse_dir / f"{eid}_match.json").read_text())
            assert set(match["labels"]) == set(corpus.label_names)
        summary = json.loads((parse_dir / "parse_summary.json").read_text())
        assert set(summary) == set(corpus.splits["test"])

    def test_parse_single_image(self, cli_dirs, tmp_path):
        corpus = load_corpus(cli_dirs["corpus"])
        eid = corpus.splits["train"][0]
        rc = main(
            ["parse", "--corpus", str(cli_dirs["corpus"]),
             "--checkpoint", str(cli_dirs["train"] / "checkpoint.mcnn"),
             "--out", str(tmp_path), "--image", eid, "-K", "2"]
            + TINY_PIPE
        )
        assert rc == 0
        assert (tmp_path / f"{eid}_labels.png").is_file()

    def test_eval_outputs(self, cli_dirs, capsys):
        rc = main(
            ["eval", "--corpus", str(cli_dirs["corpus"]),
             "--pred", str(cli_dirs["parse"]), "--split", "test"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "avg F1" in out
        assert (cli_dirs["parse"] / "metrics.json").is_file()
        assert (cli_dirs["parse"] / "metrics.csv").is_file()
        assert (cli_dirs["parse"] / "per_label_f1.png").is_file()

    def test_eval_predictions_score_against_truth(self, cli_dirs):
        rc = main(
            ["eval", "--corpus", str(cli_dirs["corpus"]),
             "--pred", str(cli_dirs["parse"]), "--split", "test"]
        )
        assert rc == 0
        blob = json.loads((cli_dirs["parse"] / "metrics.json").read_text())
        assert 0.0 <= blob["accuracy"] <= 1.0
        assert len(blob["per_label"]) == 8

    def test_index_cache_roundtrip(self, cli_dirs, tmp_path):
        cache = tmp_path / "index.knn"
        corpus = load_corpus(cli_dirs["corpus"])
        eid = corpus.splits["test"][0]
        base = ["parse", "--corpus", str(cli_dirs["corpus"]),
                "--checkpoint", str(cli_dirs["train"] / "checkpoint.mcnn"),
                "--image", eid, "-K", "2", "--index-cache", str(cache)] + TINY_PIPE
        rc = main(base + ["--out", str(tmp_path / "a")])
        assert rc == 0 and cache.is_file()
        rc = main(base + ["--out", str(tmp_path / "b")])
        assert rc == 0
        a = (tmp_path / "a" / f"{eid}_labels.png").read_bytes()
        b = (tmp_path / "b" / f"{eid}_labels.png").read_bytes()
        assert a == b

    def test_resume_requires_matching_config(self, cli_dirs, tmp_path, capsys):
        rc = main(
            ["train", "--corpus", str(cli_dirs["corpus"]), "--out", str(tmp_path),
             "--resume", str(cli_dirs["train"] / "checkpoint.mcnn"),
             "--set", "mcnn.layers=2", "--set", "mcnn.single_maps=6",
             "--set", "mcnn.cross_maps=4", "--set", "mcnn.cross_layers=2",
             "--set", "mcnn.fc_dims=16"] + TINY_TRAIN
        )
        assert rc == 1
        assert "different network config" in capsys.readouterr().err


class TestCliErrors:
    def test_missing_required_argument_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", "/tmp/x"])
        assert exc.value.code == 1

    def test_unknown_subcommand_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code == 1

    def test_configuration_error_exits_one(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path), "--set", "bogus.key=1"])
        assert rc == 1
        assert "configuration error" in capsys.readouterr().err

    def test_unknown_image_id_exits_two(self, cli_dirs, tmp_path, capsys):
        rc = main(
            ["parse", "--corpus", str(cli_dirs["corpus"]),
             "--checkpoint", str(cli_dirs["train"] / "checkpoint.mcnn"),
             "--out", str(tmp_path), "--image", "no_such_entry"]
        )
        assert rc == 2
        assert "data error" in capsys.readouterr().err

    def test_eval_missing_prediction_exits_two(self, cli_dirs, tmp_path, capsys):
        rc = main(
            ["eval", "--corpus", str(cli_dirs["corpus"]),
             "--pred", str(tmp_path), "--split", "test"]
        )
        assert rc == 2
        assert "missing predicted label map" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_passes_at_default_tolerance(self, tmp_path, capsys):
        rc = main(["gradcheck", "--samples", "40", "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        blob = json.loads((tmp_path / "gradcheck.json").read_text())
        assert blob["passed"] is True
        assert blob["max_rel_error"] < 1e-4

    def test_fails_at_absurd_tolerance(self, capsys):
        rc = main(["gradcheck", "--samples", "10", "--tolerance", "1e-18"])
        assert rc == 3
        assert "FAIL" in capsys.readouterr().out


class TestAblateCommand:
    def test_two_variant_sweep(self, cli_dirs, tmp_path, capsys):
        rc = main(
            ["ablate", "--corpus", str(cli_dirs["corpus"]), "--out", str(tmp_path),
             "--variants", "no-cross,full"]
            + TINY_NET + TINY_TRAIN + TINY_PIPE
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "no-cross" in out and "full" in out
        assert (tmp_path / "ablation.csv").is_file()
        assert (tmp_path / "ablation.json").is_file()
        assert (tmp_path / "ablation.txt").is_file()
        assert (tmp_path / "ablation.png").is_file()
        blob = json.loads((tmp_path / "ablation.json").read_text())
        assert set(blob) == {"no-cross", "full"}
