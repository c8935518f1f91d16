"""End-to-end runs of every subcommand on tiny settings."""

import pytest

from spsnet.cli import main
from spsnet.data import load_dataset
from spsnet.trainer import load_checkpoint

TINY = "N=4\nbatch=2\nsteps=2\nd=8\nhidden=8\nenc_hidden=8\nH=16\nW=16\ntrain_sequences=2\nsequence_length=10\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--seed", "3", "--sequences", "2", "--length", "10", "--res", "16",
                 "--out", str(d / "data.bin")]) == 0
    assert main(["train", "--config", str(d / "tiny.cfg"), "--data", str(d / "data.bin"),
                 "--out", str(d / "run"), "--log-every", "1"]) == 0
    return d


class TestCommands:
    def test_gen_data(self, workdir):
        ds = load_dataset(workdir / "data.bin")
        assert len(ds.sequences) == 2 and ds.sequences[0].length == 10 and ds.H == 16

    def test_train_outputs(self, workdir):
        run = workdir / "run"
        state = load_checkpoint(run / "model.ckpt")
        assert state.step == 2 and state.model.cfg.N == 4
        lines = (run / "losses.csv").read_text().splitlines()
        assert lines[0] == "step,term,value" and {line.split(",")[0] for line in lines[1:]} == {"1", "2"}
        assert "steps=2" in (run / "config.txt").read_text()

    def test_resume(self, workdir):
        out = workdir / "resumed"
        assert main(["train", "--config", str(workdir / "tiny.cfg"), "--data", str(workdir / "data.bin"),
                     "--steps", "3", "--resume", str(workdir / "run" / "model.ckpt"), "--out", str(out)]) == 0
        assert load_checkpoint(out / "model.ckpt").step == 3

    def test_eval(self, workdir, capsys):
        csv = workdir / "report.csv"
        assert main(["eval", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                     "--occluded-seed", "1", "--out", str(csv)]) == 0
        assert "mean" in capsys.readouterr().out
        assert csv.read_text().startswith("sequence,mpjpe")

    def test_infer(self, workdir, capsys):
        out = workdir / "pred"
        assert main(["infer", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                     "--index", "1", "--out", str(out), "--obj-every", "5"]) == 0
        assert "10 frames" in capsys.readouterr().out
        assert len(list(out.glob("mesh_*.obj"))) == 2 and (out / "camera.csv").exists()

    def test_ablate(self, workdir, capsys):
        assert main(["ablate", "--config", str(workdir / "tiny.cfg"), "--seeds", "0", "--steps", "1",
                     "--cells", "full,no_mask"]) == 0
        out = capsys.readouterr().out
        assert "full" in out and "no_mask" in out

    def test_track(self, tmp_path, capsys):
        det = tmp_path / "det.csv"
        det.write_text("frame,x_min,y_min,x_max,y_max,score\n0,0,0,4,4,1\n0,20,20,24,24,1\n1,1,0,5,4,1\n")
        assert main(["track", "--detections", str(det), "--out", str(tmp_path / "t.csv")]) == 0
        assert "2 tracks over 3 boxes" in capsys.readouterr().out

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["fly"])
