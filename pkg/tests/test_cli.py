import re

import pytest

from helpers import make_blob_labels, make_texture, shift_image
from ssemreg.cli import main
from ssemreg.stackio import load_stack, load_vector_map, save_image, save_stack
from ssemreg.stacks import SectionStack


def report_value(capsys_text, key):
    m = re.search(rf"^{re.escape(key)}=(.+)$", capsys_text, re.MULTILINE)
    assert m, f"missing report line {key!r} in:\n{capsys_text}"
    return m.group(1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny raw stack, a quickly trained checkpoint, and a shifted pair."""
    root = tmp_path_factory.mktemp("cliws")
    base = make_texture(32, 32, seed=0)
    sections = [make_texture(32, 32, seed=i) for i in range(3)]
    save_stack(SectionStack.from_arrays(sections), root / "stack")
    save_image(base, root / "fixed.png", "raw")
    save_image(shift_image(base, 0, 2), root / "moving.png", "raw")

    rc = main(["train", "--stack", str(root / "stack"), "--out", str(root / "model.ckpt"),
               "--steps", "40", "--set", "patch_size=16", "--set", "batch_size=2", "--seed", "1"])
    assert rc == 0
    return root


def test_no_arguments_usage_exit_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_exit_2(capsys):
    assert main(["frobnicate"]) == 2


def test_train_writes_checkpoint_and_curve(workspace):
    assert (workspace / "model.ckpt").exists()
    curve = (workspace / "model.ckpt.loss.csv").read_text().splitlines()
    assert curve[0] == "step,loss"
    assert len(curve) == 41


def test_align_pair_identical_images(workspace, capsys, tmp_path):
    rc = main(["align-pair", "--fixed", str(workspace / "fixed.png"),
               "--moving", str(workspace / "fixed.png"),
               "--model", str(workspace / "model.ckpt"),
               "--out", str(tmp_path / "pair"),
               "--iterations", "10", "--set", "ncc_window=16", "--set", "ncc_stride=16",
               "--grid-spacing", "16"])
    out = capsys.readouterr().out
    assert rc == 0
    assert float(report_value(out, "mean_abs_v_feature")) <= 0.1
    assert float(report_value(out, "mean_abs_v_pixel")) <= 0.1
    for name in ("aligned_feature.png", "aligned_pixel.png", "vector_map_feature.vmap",
                 "vector_map_pixel.vmap", "heatmap_feature.png", "heatmap_feature.csv",
                 "heatmap_unregistered.png"):
        assert (tmp_path / "pair" / name).exists(), name


def test_align_pair_single_similarity(workspace, capsys, tmp_path):
    rc = main(["align-pair", "--fixed", str(workspace / "fixed.png"),
               "--moving", str(workspace / "moving.png"),
               "--model", str(workspace / "model.ckpt"),
               "--out", str(tmp_path / "pair1"), "--similarity", "pixel",
               "--iterations", "40", "--grid-spacing", "16",
               "--set", "ncc_window=16", "--set", "ncc_stride=8"])
    out = capsys.readouterr().out
    assert rc == 0
    assert not (tmp_path / "pair1" / "aligned_feature.png").exists()
    assert float(report_value(out, "ncc_pixel")) > float(report_value(out, "ncc_unregistered"))


def test_align_stack_outputs(workspace, capsys, tmp_path):
    rc = main(["align-stack", "--stack", str(workspace / "stack"),
               "--model", str(workspace / "model.ckpt"),
               "--out", str(tmp_path / "aligned"),
               "--iterations", "8", "--window", "2", "--grid-spacing", "16"])
    out = capsys.readouterr().out
    assert rc == 0
    assert report_value(out, "peak_resident_sections") == "3"
    aligned = load_stack(tmp_path / "aligned" / "sections", "raw")
    assert aligned.depth == 3
    maps = sorted((tmp_path / "aligned" / "maps").iterdir())
    assert len(maps) == 3
    load_vector_map(maps[0], expect="coarse")


def test_gen_warp_and_eval_epe(workspace, capsys, tmp_path):
    rc = main(["gen-warp", "--stack", str(workspace / "stack"),
               "--out", str(tmp_path / "warped"), "--sigma", "3", "--points", "6", "--seed", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert float(report_value(out, "max_abs_flow")) > 0
    flows = sorted((tmp_path / "warped" / "flows").iterdir())
    assert len(flows) == 3

    rc = main(["eval", "epe", "--est", str(flows[0]), "--gt", str(flows[0])])
    out = capsys.readouterr().out
    assert rc == 0
    assert float(report_value(out, "mean_endpoint_error")) == 0.0


def test_eval_ncc_and_heatmap(workspace, capsys, tmp_path):
    rc = main(["eval", "ncc", "--a", str(workspace / "fixed.png"), "--b", str(workspace / "fixed.png")])
    out = capsys.readouterr().out
    assert rc == 0
    assert float(report_value(out, "ncc")) == pytest.approx(1.0)

    rc = main(["eval", "heatmap", "--a", str(workspace / "fixed.png"),
               "--b", str(workspace / "moving.png"), "--window", "16", "--stride", "8",
               "--out-prefix", str(tmp_path / "hm")])
    out = capsys.readouterr().out
    assert rc == 0
    assert (tmp_path / "hm.png").exists() and (tmp_path / "hm.csv").exists()
    assert float(report_value(out, "heatmap_mean")) < 1.0


def test_eval_dice_and_depth_mismatch(capsys, tmp_path):
    labels = [make_blob_labels(16, 16, 4, seed=i) for i in range(2)]
    save_stack(SectionStack.from_arrays(labels, kind="label"), tmp_path / "gt")
    save_stack(SectionStack.from_arrays(labels, kind="label"), tmp_path / "same")
    rc = main(["eval", "dice", "--gt", str(tmp_path / "gt"), "--test", str(tmp_path / "same"), "--k", "3"])
    out = capsys.readouterr().out
    assert rc == 0
    assert float(report_value(out, "mean_dice")) == 1.0

    save_stack(SectionStack.from_arrays(labels[:1], kind="label"), tmp_path / "short")
    rc = main(["eval", "dice", "--gt", str(tmp_path / "gt"), "--test", str(tmp_path / "short")])
    captured = capsys.readouterr()
    assert rc == 1
    assert "2" in captured.err and "1" in captured.err


def test_xsection(workspace, capsys, tmp_path):
    rc = main(["xsection", "--stack", str(workspace / "stack"), "--axis", "row",
               "--index", "16", "--out", str(tmp_path / "slice.png")])
    out = capsys.readouterr().out
    assert rc == 0
    assert report_value(out, "slice_shape") == "3x32"
    assert (tmp_path / "slice.png").exists()


def test_runtime_error_exit_1(capsys, tmp_path):
    rc = main(["eval", "ncc", "--a", str(tmp_path / "missing.png"), "--b", str(tmp_path / "missing.png")])
    captured = capsys.readouterr()
    assert rc == 1
    assert captured.err.startswith("error:")


def test_config_echo_at_startup(workspace, capsys, tmp_path):
    main(["gen-warp", "--stack", str(workspace / "stack"), "--out", str(tmp_path / "w2"),
          "--sigma", "0", "--points", "4"])
    out = capsys.readouterr().out
    assert "config.sigma=0.0" in out
    assert "config.alpha=0.1" in out


def test_cli_flag_overrides_config_file(workspace, capsys, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("alpha=0.2\nsigma=1.0\n")
    main(["gen-warp", "--stack", str(workspace / "stack"), "--out", str(tmp_path / "w3"),
          "--config", str(cfg_file), "--alpha", "0.3", "--points", "4"])
    out = capsys.readouterr().out
    assert "config.alpha=0.3" in out   # flag beats file
    assert "config.sigma=1.0" in out   # file beats default
