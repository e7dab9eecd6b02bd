import json

import pytest

from rectiflow.cli import main

# Small enough to run the whole chain in well under a minute.
TINY = [
    "data.n_normals=64",
    "data.image_size=32",
    "data.n_textures=4",
    "codec.epochs=2",
    "codec.width=4",
    "codec.target_mse=1.0",
    "train.epochs=1",
    "train.batch_size=16",
    "train.reflow_epochs=1",
    "train.teacher_steps=2",
    "eval.n_cases=4",
    "eval.steps=[1, 2]",
]


def _sets(extra=()):
    out = []
    for s in list(TINY) + list(extra):
        out += ["--set", s]
    return out


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_phantom_gen_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["phantom-gen", "--n", "10", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b
    assert sum(1 for k in a if k.suffix == ".pgm") == 10
    assert not (tmp_path / "a" / "RUNNING").exists()
    assert json.loads((tmp_path / "a" / "seeds.json").read_text())["data"] == 1


def test_refuses_non_empty_output_unless_forced(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["phantom-gen", "--n", "2", "--out", out]) == 0
    assert main(["phantom-gen", "--n", "2", "--out", out]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["phantom-gen", "--n", "2", "--out", out, "--force"]) == 0


def test_bad_config_exits_2(tmp_path):
    assert main(["phantom-gen", "--out", str(tmp_path / "o"), "--set", "train.nope=1"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"lr": "fast"}}')
    assert main(["phantom-gen", "--out", str(tmp_path / "p"), "--config", str(cfg)]) == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RECTIFLOW_OUT", str(tmp_path / "root"))
    assert main(["phantom-gen", "--n", "1"]) == 0
    assert (tmp_path / "root" / "phantom-gen" / "resolved_config.json").exists()


def test_missing_checkpoint_is_usage_error(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "e")]) == 2
    assert (tmp_path / "e" / "FAILED").exists() and not (tmp_path / "e" / "RUNNING").exists()


def test_codec_fit_failure_exits_3_and_keeps_partial(tmp_path):
    out = tmp_path / "c"
    assert main(["fit-codec", "--out", str(out)] + _sets(["codec.epochs=1", "codec.target_mse=1e-9"])) == 3
    assert (out / "codec.partial" / "manifest.json").exists()
    assert "CodecFitError" in (out / "FAILED").read_text()


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    assert main(["fit-codec", "--out", str(root / "codec")] + _sets()) == 0
    assert main(["train", "--codec", str(root / "codec" / "codec"), "--out", str(root / "train")] + _sets()) == 0
    assert main(["reflow", "--teacher", str(root / "train" / "checkpoint"), "--out", str(root / "reflow")] + _sets()) == 0
    return root


def test_chain_artifacts(chain):
    assert json.loads((chain / "codec" / "codec_fit.json").read_text())["heldout_mse"] < 1.0
    assert (chain / "train" / "loss.csv").read_text().startswith("epoch,mean_loss\n1,")
    meta = json.loads((chain / "reflow" / "checkpoint" / "manifest.json").read_text())
    assert meta["meta"]["flow"]["generation"] == "2-reflect"


def test_eval_is_reproducible_from_checkpoint(chain):
    ck = str(chain / "reflow" / "checkpoint")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ck, "--out", str(chain / name)] + _sets(["eval.dump_maps=true"])) == 0
    csv1 = (chain / "e1" / "cases.csv").read_text()
    assert csv1 == (chain / "e2" / "cases.csv").read_text()
    assert len(csv1.splitlines()) == 1 + 4 * 2
    assert len(list((chain / "e1" / "maps_steps2").glob("*.pgm"))) == 4


def test_eval_on_exported_lesion_set(chain):
    ds = chain / "lesions"
    assert main(["phantom-gen", "--lesions", "--n", "3", "--out", str(ds)] + _sets()) == 0
    assert main(["eval", "--checkpoint", str(chain / "train" / "checkpoint"), "--cases", str(ds / "dataset"), "--out", str(chain / "e3")] + _sets()) == 0
    summary = json.loads((chain / "e3" / "summary.json").read_text())
    assert summary["1"]["n_cases"] == 3


def test_correct_and_trajectory(chain):
    ds = chain / "normals"
    assert main(["phantom-gen", "--n", "2", "--out", str(ds)] + _sets()) == 0
    ck = str(chain / "train" / "checkpoint")
    assert main(["correct", "--checkpoint", ck, "--input", str(ds / "dataset" / "images"), "--steps", "2", "--out", str(chain / "c")] + _sets()) == 0
    assert len(list((chain / "c" / "maps").glob("*.pgm"))) == 2
    assert len((chain / "c" / "maps.csv").read_text().splitlines()) == 3
    assert main(["trajectory", "--checkpoint", ck, "--steps", "3", "--n", "2", "--out", str(chain / "t")] + _sets()) == 0
    assert len(list((chain / "t" / "case01").glob("image_*.pgm"))) == 4
    assert (chain / "t" / "straightness.csv").read_text().startswith("generation,steps,straightness")


def test_codec_checkpoint_is_not_a_flow(chain):
    assert main(["eval", "--checkpoint", str(chain / "codec" / "codec"), "--out", str(chain / "bad")] + _sets()) == 3
