import numpy as np
import pytest

from scenemoe import experts as ex
from scenemoe import numerics as nm
from scenemoe import synthgen as sg
from scenemoe import trainer as tr
from scenemoe.errors import CheckpointVersionError, ConfigError, DataError, StateError

from conftest import smoke_generator_config, smoke_model_config, smoke_train_config


def tape_bytes(tape):
    return b"".join(tape[n].data.tobytes() for n in tape.names())


class TestStage1:
    def test_zero_epochs_leave_parameters_bitwise(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=1)
        before = tape_bytes(model.tape)
        tr.stage1_scene_tuning(model, train, smoke_train_config(epochs=0))
        assert tape_bytes(model.tape) == before

    def test_loss_decreases_over_epochs(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=2)
        records = tr.stage1_scene_tuning(model, train, smoke_train_config(epochs=2))
        assert records[-1]["loss"] <= records[0]["loss"]
        assert model.flags["scene_tuned"]

    def test_reconstruction_beats_zero_predictor_after_tuning(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=3)
        tr.stage1_scene_tuning(model, train, smoke_train_config(epochs=3))
        zero_mse, model_mse = [], []
        for _, seg in train.all_segments():
            mats = seg.bundle.by_channel()
            for ch in sg.CHANNELS:
                target = ex.reconstruction_target(mats[ch])
                out = ex.expert_forward(model.tape, f"expert_{ch}", model.config.expert_config(ch), mats[ch])
                pred = ex.scene_decoder(model.tape, f"expert_{ch}", out.pooled)
                model_mse.append(((pred.data - target) ** 2).mean())
                zero_mse.append((target**2).mean())
        assert np.mean(model_mse) < 0.5 * np.mean(zero_mse)

    def test_skip_flag_recorded(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=4)
        records = tr.stage1_scene_tuning(model, train, smoke_train_config(ablation="no_scene_tuning"))
        assert records == []
        assert model.flags["scene_tuning_skipped"]
        assert not model.flags["scene_tuned"]

    def test_width_mismatch_rejected(self, smoke_dataset):
        train, _, _ = smoke_dataset
        bad = smoke_model_config(train, channel_widths=(9, 10, 6, 12))
        model = tr.build_model(bad, seed=5)
        with pytest.raises(ConfigError):
            tr.stage1_scene_tuning(model, train, smoke_train_config())


class TestForwardFull:
    def make_model(self, train, seed=6):
        model = tr.build_model(smoke_model_config(train), seed=seed)
        tr.build_dictionary(model, train, seed=seed)
        return model

    def test_missing_dictionary_state_error(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=7)
        seg = train.samples[0].segments[0]
        with pytest.raises(StateError):
            tr.forward_full(model, seg.bundle, "full")

    def test_double_ablation_still_runs(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=8)
        seg = train.samples[0].segments[0]
        # no_sbm and no_iec composed: plain mean of experts, no dictionary needed
        fr = tr.forward_full(model, seg.bundle, "no_sbm+no_iec")
        outs = tr.expert_outputs(model, seg.bundle)
        z = nm.layer_norm(nm.layer_norm(nm.mean_rows(nm.stack_rows(outs))))
        want = nm.linear(z, model.tape["head/class/w"], model.tape["head/class/b"])
        np.testing.assert_array_equal(fr.class_logits.data, want.data)

    def test_no_sbm_uses_uniform_mean(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = self.make_model(train)
        seg = train.samples[0].segments[0]
        fr = tr.forward_full(model, seg.bundle, "no_sbm")
        np.testing.assert_allclose(fr.probs.data, [[0.25] * 4], atol=1e-15)

    def test_toggling_iec_keeps_gating_bitwise(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = self.make_model(train)
        seg = train.samples[0].segments[0]
        full = tr.forward_full(model, seg.bundle, "full")
        without = tr.forward_full(model, seg.bundle, "no_iec")
        assert full.probs.data.tobytes() == without.probs.data.tobytes()
        assert np.abs(full.class_logits.data - without.class_logits.data).max() > 0.0

    def test_grad_check_through_full_forward_and_losses(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = self.make_model(train, seed=9)
        segments = [seg for _, seg in train.all_segments()][:2]
        labels = [train.class_index(s.class_name) for s in segments]
        from scenemoe.sbm import BalanceLossConfig, router_balance_loss

        balance = BalanceLossConfig(1e-3, 1e-2, model.config.internal_widths)

        def f():
            rows, probs = [], []
            for seg in segments:
                fr = tr.forward_full(model, seg.bundle, "full")
                rows.append(fr.class_logits)
                probs.append(fr.probs)
            loss = nm.cross_entropy(nm.stack_rows(rows), labels)
            ent, size = router_balance_loss(nm.stack_rows(probs), balance)
            return nm.add(loss, nm.add(ent, size))

        params = [(n, model.tape[n]) for n in model.tape.names() if "decoder" not in n]
        res = nm.finite_diff_check(f, params, max_per_param=3, rng=np.random.default_rng(10))
        assert res.max_rel_err < 1e-4


class TestStage2:
    def test_smoke_accuracy(self, trained_smoke_model):
        _, records, _ = trained_smoke_model
        summaries = [r for r in records if "epoch_summary" in r]
        assert summaries[-1]["train_acc"] >= 0.95

    def test_loss_decomposition_exact(self, trained_smoke_model):
        _, records, _ = trained_smoke_model
        steps = [r for r in records if "step" in r]
        assert steps
        for r in steps:
            assert abs(r["loss"] - (r["l_task"] + r["l_rb"])) <= 1e-12

    def test_zero_alpha_beta_is_pure_task_loss(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=11)
        cfg = smoke_train_config(alpha=0.0, beta=0.0, epochs=1)
        tr.build_dictionary(model, train, seed=11)
        records = tr.stage2_omni_tuning(model, train, cfg)
        for r in records:
            if "step" in r:
                assert r["l_rb"] == 0.0
                assert r["loss"] == r["l_task"]

    def test_training_is_deterministic(self, smoke_dataset):
        train, _, _ = smoke_dataset
        finals = []
        for _ in range(2):
            cfg = smoke_train_config(epochs=1)
            model, records = tr.train_pipeline(train, smoke_model_config(train), cfg)
            steps = [r for r in records if "step" in r]
            finals.append((steps[-1]["loss"], tape_bytes(model.tape)))
        assert finals[0][0] == finals[1][0]
        assert finals[0][1] == finals[1][1]

    def test_ablation_gradient_shapes_are_isolated(self, smoke_dataset):
        train, _, _ = smoke_dataset

        def grad_shapes(ablation):
            model = tr.build_model(smoke_model_config(train), seed=12)
            if ablation != "no_iec":
                tr.build_dictionary(model, train, seed=12)
            cfg = smoke_train_config(epochs=1, ablation=ablation)
            tr.stage2_omni_tuning(model, train, cfg)
            return {n: model.tape[n].grad.shape for n in model.tape.names()}

    # gradient slots keep their shapes regardless of which branch is ablated
        assert grad_shapes("no_sbm") == grad_shapes("no_iec")


class TestPredictTriples:
    def test_merge_rule_hand_fixture(self, smoke_dataset, monkeypatch):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=13)
        video = train.samples[0]
        assert len(video.segments) == 4
        seq = [0, 2, 2, 0]  # neutral, negative, negative, neutral
        calls = iter(seq)

        def fake_forward(model_, bundle, ablation="full"):
            cid = next(calls)
            logits = np.full((1, 3), -5.0)
            logits[0, cid] = 5.0
            cause = np.array([[0.0, 3.0, 0.0, 0.0]])
            return tr.ForwardResult(nm.tensor(logits), nm.tensor(cause), nm.tensor([[0.25] * 4]))

        monkeypatch.setattr(tr, "forward_full", fake_forward)
        triples = tr.predict_triples(model, video, segment_seconds=1.0, ablation="no_iec")
        assert len(triples) == 1
        t = triples[0]
        assert (t.start_s, t.end_s) == (1.0, 3.0)
        assert t.class_name == "negative" and t.class_claim == "negative"
        assert t.cause_channel == "action"
        assert t.cause_text == sg.render_cause_text("negative", "action", 0)
        assert t.confidence > 0.99

    def test_all_background_gives_empty_list(self, smoke_dataset, monkeypatch):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=14)
        video = train.samples[0]

        def fake_forward(model_, bundle, ablation="full"):
            logits = np.array([[5.0, -5.0, -5.0]])
            return tr.ForwardResult(nm.tensor(logits), nm.tensor(np.zeros((1, 4))), nm.tensor([[0.25] * 4]))

        monkeypatch.setattr(tr, "forward_full", fake_forward)
        assert tr.predict_triples(model, video, ablation="no_iec") == []

    def test_decoding_partitions_non_background(self, trained_smoke_model, smoke_dataset):
        model, _, cfg = trained_smoke_model
        _, test, _ = smoke_dataset
        for video in test.samples[:5]:
            triples = tr.predict_triples(model, video, segment_seconds=test.segment_seconds)
            covered = set()
            for t in triples:
                seg_range = range(int(t.start_s), int(t.end_s))
                assert not covered & set(seg_range)
                covered |= set(seg_range)
            again = tr.predict_triples(model, video, segment_seconds=test.segment_seconds)
            assert [(a.start_s, a.end_s, a.class_name) for a in triples] == [
                (a.start_s, a.end_s, a.class_name) for a in again
            ]


class TestCheckpoints:
    def test_round_trip_byte_identical(self, trained_smoke_model, tmp_path):
        model, _, _ = trained_smoke_model
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tr.save_checkpoint(model, p1)
        loaded = tr.load_checkpoint(p1)
        tr.save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_reload(self, trained_smoke_model, smoke_dataset, tmp_path):
        model, _, _ = trained_smoke_model
        _, test, _ = smoke_dataset
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(model, path)
        loaded = tr.load_checkpoint(path)
        seg = test.samples[0].segments[0]
        a = tr.forward_full(model, seg.bundle, "full")
        b = tr.forward_full(loaded, seg.bundle, "full")
        assert a.class_logits.data.tobytes() == b.class_logits.data.tobytes()
        assert a.cause_logits.data.tobytes() == b.cause_logits.data.tobytes()

    def test_truncated_checkpoint_is_a_data_error(self, trained_smoke_model, tmp_path):
        model, _, _ = trained_smoke_model
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(DataError, match="truncated"):
            tr.load_checkpoint(path)

    def test_version_mismatch(self, trained_smoke_model, tmp_path):
        model, _, _ = trained_smoke_model
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[len(tr.CHECKPOINT_MAGIC)] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            tr.load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(DataError):
            tr.load_checkpoint(path)


class TestDictionary:
    def test_embedding_count_conservation(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=15)
        from scenemoe.iec import embed_segments

        rows = embed_segments(model, train)
        assert rows.shape == (len(train.all_segments()), model.config.d_model)

    def test_rebuild_deterministic(self, smoke_dataset):
        train, _, _ = smoke_dataset
        model = tr.build_model(smoke_model_config(train), seed=16)
        from scenemoe.iec import rebuild_dictionary

        a = rebuild_dictionary(model, train, 8, seed=3)
        b = rebuild_dictionary(model, train, 8, seed=3)
        assert a.centroids.tobytes() == b.centroids.tobytes()
        assert a.provenance.dataset_hash == train.content_hash != ""

    def test_confounder_diagnostic_reported(self, tmp_path):
        cfg = smoke_generator_config(confounder_strength=2.0, num_videos=16, seed=9)
        out = tmp_path / "conf"
        sg.generate_dataset(cfg, out)
        train = sg.load_dataset(out, "train")
        model = tr.build_model(smoke_model_config(train), seed=17)
        signs = {
            v.video_id: int(np.sign(sg.video_confounder(cfg, i)[0]))
            for i, v in enumerate(train.samples)
        }
        from scenemoe.iec import dictionary_confounder_diagnostic

        diag = dictionary_confounder_diagnostic(model, train, signs)
        # reported, never asserted: print for the log, check keys only
        assert set(diag) == {"silhouette_by_confounder_sign", "silhouette_by_class", "segments"}
        print("confounder diagnostic:", diag)
