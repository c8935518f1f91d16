"""Config, batches, training determinism, checkpoints, windowed inference and evaluation."""

import numpy as np
import pytest

from spsnet.body import make_default_body
from spsnet.data import make_corpus
from spsnet.losses import LossWeights
from spsnet.trainer import (SPSNet, TrainConfig, TrainState, ablation_cells, ablation_table, build_corpus,
                            checkpoint_bytes, evaluate, infer, load_checkpoint, loss_terms, make_batch,
                            reflect_indices, run_ablation, save_checkpoint, state_from_bytes, train,
                            train_step, window_starts, write_loss_log, write_prediction)


def tiny(**changes):
    cfg = TrainConfig(N=4, batch=2, steps=3, d=8, hidden=8, enc_hidden=8, H=16, W=16,
                      train_sequences=3, sequence_length=12)
    return cfg.replace(**changes).validate()


@pytest.fixture(scope="module")
def body():
    return make_default_body(0, n_vertices=60, ring_size=4)


@pytest.fixture(scope="module")
def corpus(body):
    return build_corpus(tiny(), body)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.N, cfg.batch, cfg.lr_est, cfg.lr_disc) == (32, 16, 5e-5, 1e-4)
        assert cfg.weights == LossWeights()
        assert (cfg.d, cfg.hidden, cfg.train_sequences, cfg.sequence_length, cfg.steps) == (64, 128, 64, 256, 5000)

    def test_text_round_trip(self):
        cfg = tiny(lr_est=1.0 / 3, no_mask=True).replace(**{"weights.camera": 0.7})
        back = TrainConfig.from_text(cfg.to_text())
        assert back == cfg and back.hash() == cfg.hash()
        assert "weights.camera=0.7" in cfg.to_text()

    def test_every_field_is_written(self):
        keys = [line.split("=")[0] for line in TrainConfig().to_text().splitlines()]
        assert len(keys) == len(set(keys)) == len(TrainConfig().items())

    def test_hash_changes_with_any_value(self):
        assert tiny().hash() != tiny(seed=1).hash()

    def test_comments_and_booleans(self):
        cfg = TrainConfig.from_text("# desk\nbatch=3  # small\nno_adv=true\n")
        assert cfg.batch == 3 and cfg.no_adv

    @pytest.mark.parametrize("text", ["bogus=1", "batch", "no_adv=maybe", "batch=0", "lr_est=-1",
                                      "no_attention=1\nrecurrent_baseline=1", "mask_reduction=max",
                                      "sequence_length=32", "weights.mask=-1"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            TrainConfig.from_text(text)


class TestBatch:
    def test_segments_overlap_by_one_frame_shift(self, corpus):
        cfg = tiny()
        b = make_batch(corpus, cfg, 0)
        N = cfg.N
        assert b.sil.shape == (2, N + 1, 16, 16) and b.pose.shape[:2] == (2, N)
        # S1 = union[:N], S2 = union[1:], so the N - 1 shared frames are the same source frames
        for i in range(2):
            matches = [s for s in corpus for n in range(s.length - N)
                       if np.array_equal(s.silhouettes[n:n + N + 1], b.sil[i])
                       and np.array_equal(s.pose[n:n + N], b.pose[i])]
            assert matches

    def test_occluded_copy_only_removes(self, corpus):
        b = make_batch(corpus, tiny(), 1)
        assert (b.occ_sil <= b.sil[:, :-1]).all() and (b.occ_vis <= b.vis[:, :-1]).all()

    def test_deterministic_per_step(self, corpus):
        a, b, c = make_batch(corpus, tiny(), 5), make_batch(corpus, tiny(), 5), make_batch(corpus, tiny(), 6)
        assert a.sil.tobytes() == b.sil.tobytes() and a.real_pose.tobytes() == b.real_pose.tobytes()
        assert a.pose.tobytes() != c.pose.tobytes()

    def test_mask_frame_subset(self, corpus):
        b = make_batch(corpus, tiny(mask_frames=2), 0)
        assert b.mask_frames.shape == (2, 2)
        assert (np.diff(b.mask_frames, axis=1) > 0).all()


class TestLossTerms:
    def test_ablation_flags_drop_terms(self, body, corpus):
        batch = make_batch(corpus, tiny(), 0)
        full, d_loss = loss_terms(SPSNet(tiny(), body), batch)
        assert set(full) == {"shape", "pose", "joint3d", "joint2d", "mask", "feature", "camera",
                             "param_pose", "param_shape", "param_camera", "adv"}
        assert d_loss is not None
        for flag, gone in [("no_camera", {"camera"}), ("no_mask", {"mask"}), ("no_forecast", {"feature"}),
                           ("no_adv", {"adv"}), ("no_param", {"param_pose", "param_shape", "param_camera"})]:
            terms, d = loss_terms(SPSNet(tiny(**{flag: True}), body), batch)
            assert set(full) - set(terms) == gone
            assert (d is None) == (flag == "no_adv")

    def test_no_param_leaves_gradients_unchanged_by_param_weights(self, body, corpus):
        batch = make_batch(corpus, tiny(), 0)
        grads = []
        for w in (0.0, 5.0):
            cfg = tiny(no_param=True).replace(**{"weights.param_pose": w, "weights.param_shape": w})
            state = TrainState(SPSNet(cfg, body))
            train_step(state, batch)
            g = state.model.est.grads()
            grads.append(np.concatenate([g[k].ravel() for k in sorted(g)]))
        np.testing.assert_array_equal(grads[0], grads[1])


class TestTraining:
    def test_same_seed_bit_identical(self, body, corpus):
        a = train(tiny(), corpus, body)
        b = train(tiny(), corpus, body)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        c = train(tiny(seed=1), corpus, body)
        assert checkpoint_bytes(a) != checkpoint_bytes(c)

    def test_resume_matches_uninterrupted(self, body, corpus):
        straight = train(tiny(steps=4), corpus, body)
        half = train(tiny(steps=4), corpus, body, until=2)
        resumed = train(tiny(steps=4), corpus, body, state_from_bytes(checkpoint_bytes(half), body))
        assert checkpoint_bytes(resumed) == checkpoint_bytes(straight)

    def test_loss_log(self, body, corpus, tmp_path):
        state = train(tiny(steps=2), corpus, body)
        assert {step for step, _, _ in state.log} == {1, 2}
        write_loss_log(state.log, tmp_path / "l.csv")
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "step,term,value" and len(lines) == len(state.log) + 1

    def test_disc_ratio_skips_discriminator_steps(self, body, corpus):
        state = TrainState(SPSNet(tiny(disc_ratio=2), body))
        keys = [set(train_step(state, make_batch(corpus, tiny(), s))) for s in range(3)]
        assert ["d_loss" in k for k in keys] == [True, False, True]

    def test_training_lowers_the_loss(self, body, corpus):
        cfg = tiny(steps=30, lr_est=1e-3, lr_disc=2e-3)
        state = train(cfg, corpus, body)
        totals = [v for _, k, v in state.log if k == "total"]
        assert np.mean(totals[-5:]) < np.mean(totals[:5])


class TestCheckpoint:
    def test_file_round_trip(self, body, corpus, tmp_path):
        state = train(tiny(steps=1), corpus, body)
        save_checkpoint(state, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt", body)
        assert back.step == 1 and back.model.cfg == state.model.cfg
        assert checkpoint_bytes(back) == (tmp_path / "m.ckpt").read_bytes()

    def test_config_hash_is_checked(self, body):
        raw = checkpoint_bytes(TrainState(SPSNet(tiny(), body)))
        tampered = raw.replace(b"batch=2", b"batch=3")
        assert tampered != raw
        with pytest.raises(ValueError):
            state_from_bytes(tampered, body)


class TestInference:
    @pytest.mark.parametrize("T,N,expect", [(10, 4, [0, 4, 6]), (8, 4, [0, 4]), (4, 4, [0]), (3, 4, [0])])
    def test_window_starts(self, T, N, expect):
        assert window_starts(T, N) == expect

    def test_reflect_indices(self):
        assert reflect_indices(3, 7).tolist() == [0, 1, 2, 1, 0, 1, 2]
        assert reflect_indices(1, 3).tolist() == [0, 0, 0]

    @pytest.fixture
    def model(self, body, corpus):
        return train(tiny(), corpus, body).model

    def test_owner_window_rule(self, model, corpus):
        seq = corpus[0].frames(0, 10)
        pred = infer(model, seq.silhouettes, seq.joints2d, seq.visibility)
        assert pred.joints.shape == (10, 12, 3) and not pred.padded
        # frames 8 and 9 are owned by the right-aligned window starting at 6
        tail = infer(model, seq.silhouettes[6:], seq.joints2d[6:], seq.visibility[6:])
        # batched and single-window matmuls may reassociate, hence the tiny tolerance
        np.testing.assert_allclose(pred.joints[8:], tail.joints[2:], rtol=0, atol=1e-15)
        head = infer(model, seq.silhouettes[:4], seq.joints2d[:4], seq.visibility[:4])
        np.testing.assert_allclose(pred.joints[:4], head.joints, rtol=0, atol=1e-15)

    def test_short_sequence_is_padded(self, model, corpus):
        seq = corpus[0].frames(0, 3)
        pred = infer(model, seq.silhouettes, seq.joints2d)
        assert pred.padded and pred.vertices.shape[0] == 3

    def test_write_prediction(self, model, corpus, body, tmp_path):
        seq = corpus[0].frames(0, 5)
        write_prediction(infer(model, seq.silhouettes, seq.joints2d), body, tmp_path, obj_every=2)
        assert sorted(p.name for p in tmp_path.glob("mesh_*.obj")) == ["mesh_00000.obj", "mesh_00002.obj",
                                                                       "mesh_00004.obj"]
        assert len((tmp_path / "joints.csv").read_text().splitlines()) == 1 + 5 * 12
        assert "padded=False" in (tmp_path / "meta.txt").read_text()


class TestEvaluation:
    def test_report_and_occlusion(self, body, corpus):
        # output layers start at zero, so only a trained model reacts to its input
        model = train(tiny(), corpus, body).model
        held = make_corpus(body, 5, 2, 6, 16, 16)
        clean = evaluate(model, held)
        assert clean.names == ["seq0", "seq1"]
        assert clean.mean()["pa_mpjpe"] <= clean.mean()["mpjpe"]
        again = evaluate(model, held, occluded_seed=3)
        assert again.rows == evaluate(model, held, occluded_seed=3).rows
        assert again.rows != clean.rows

    def test_ablation_grid(self, body, corpus):
        cells = ablation_cells(tiny(steps=1))
        assert set(cells) == {"full", "no_camera", "no_mask", "no_param", "no_adv", "no_forecast",
                              "no_attention", "recurrent_baseline", "N=8", "N=16"}
        assert cells["N=8"].N == 8 and cells["recurrent_baseline"].recurrent_baseline
        picked = {k: cells[k] for k in ("full", "no_adv")}
        results = run_ablation(picked, [0, 1], make_corpus(body, 5, 1, 6, 16, 16), corpus=corpus, body=body)
        assert [r.name for r in results] == ["full", "no_adv"]
        assert all(len(r.clean) == len(r.occluded) == 2 for r in results)
        assert "no_adv" in ablation_table(results)
