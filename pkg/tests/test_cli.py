import numpy as np
import pytest

from uclidnet import cli, formats, net, train


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.cfg"
    cfg.write_text("# tiny run\nn_scenes = 1\nn_views = 2\npretrain_iters = 1\n", encoding="utf-8")
    ck = d / "m.ucld"
    assert run("train", "--config", cfg, "--iters", 2, "--seed", 4, "--out", ck) == 0
    return d, ck


def test_gen_writes_views(tmp_path):
    out = tmp_path / "scene.bin"
    assert run("gen", "--scene", 3, "--view", 0, "--view", 5, "--out", out) == 0
    (t,) = formats.load_archive(out.read_bytes(), 1)
    assert set(t) == {"scene/gt_cloud", "scene/occupancy"} | {f"view{v}/{k}" for v in (0, 5)
                                                               for k in ("image", "depth", "camera")}
    assert t["view5/image"].shape == (3, 64, 64) and t["scene/occupancy"].shape == (16, 16, 16)
    assert t["view0/camera"].shape == (17,)


def test_train_outputs(trained):
    d, ck = trained
    back = train.load_checkpoint(ck)
    assert back.iteration == 2 and back.config == net.DESK
    lines = (d / "m.ucld.log.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].split(",")[1] == "bce"


def test_train_is_reproducible(trained, tmp_path):
    d, ck = trained
    again = tmp_path / "again.ucld"
    assert run("train", "--config", d / "run.cfg", "--iters", 2, "--seed", 4, "--out", again) == 0
    assert again.read_bytes() == ck.read_bytes()


def test_reconstruct_and_fuse(trained, tmp_path):
    _, ck = trained
    r = tmp_path / "r.ply"
    assert run("reconstruct", "--ckpt", ck, "--scene", 0, "--view", 1, "--out", r) == 0
    assert formats.read_ply(r)[0].ndim == 2
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    assert run("fuse", "--ckpt", ck, "--scene", 0, "--view", 0, "--view", 1, "--out", a) == 0
    assert run("fuse", "--ckpt", ck, "--scene", 0, "--view", 1, "--view", 0, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_csv(trained, tmp_path):
    _, ck = trained
    out = tmp_path / "m.csv"
    assert run("eval", "--ckpt", ck, "--scene", 0, "--count", 2, "--out", out) == 0
    raw = out.read_bytes()
    assert raw.split(b"\n")[0] == b"scene,cd_l1,cd_l2_x1e3,emd_x1e2,fscore_5pct,siou"
    assert [r[0] for r in formats.read_metrics_csv(out)] == ["0", "1", "mean"]


def test_missing_arguments(trained, tmp_path, capsys):
    _, ck = trained
    with pytest.raises(SystemExit):
        run("reconstruct", "--view", 0)
    with pytest.raises(SystemExit):
        run("fuse", "--ckpt", ck, "--view", 0)
    assert run("reconstruct", "--ckpt", tmp_path / "nope.ucld", "--view", 0) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "x") == 2
    assert "unknown key" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ucld"
    bad.write_bytes(b"UCLD\x01\x00\x00\x00garbage")
    assert run("reconstruct", "--ckpt", bad, "--view", 0) == 2


def test_gradcheck_corruption_exits_nonzero(capsys):
    assert run("gradcheck", "--count", 1, "--corrupt", "conv3d") == 1
    out = capsys.readouterr().out
    assert "FAIL conv3d" in out and "failure: conv3d seed 0" in out


def test_preset_choice_enforced():
    with pytest.raises(SystemExit):
        run("train", "--preset", "huge")
