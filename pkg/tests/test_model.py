"""Model configuration, initialization, rollout structure, and state rules."""

import numpy as np
import pytest

from slan import autodiff as ad
from slan import data, kernels, model

from conftest import make_random_instance


def numpy_rollout(params: model.SlanParams, sched: data.SwitchSchedule,
                  statics=None) -> np.ndarray:
    """Step-by-step recomputation of the logits outside the tape."""
    cfg = params.config
    h = {}
    h_step = {}
    c = params.c0
    att_w = att_b = None
    if cfg.aggregation == "attention":
        att_w = params["attention.W"].value
        att_b = params["attention.b"].value
    for j, step in enumerate(sched.steps):
        fresh = []
        for m, x, delta in step:
            h_new, c_new = model.cell_step(params, m, x, delta,
                                           h.get(m, params.h0[m]), c)
            h[m] = h_new
            h_step[m] = j
            fresh.append(c_new)
        c = model.aggregate_values(cfg.aggregation, fresh, att_w, att_b)

    parts = []
    if cfg.concat in ("both", "global"):
        parts.append(c)
    if cfg.concat in ("both", "local"):
        for m in range(cfg.sensor_count):
            parts.append(h.get(m, params.h0[m]))
    if cfg.static_count:
        parts.append(params["static.W"].value @ np.asarray(statics)
                     + params["static.b"].value)
    flat = np.concatenate(parts)
    return params["head.W"].value @ flat + params["head.b"].value


class TestConfig:
    def test_concat_dims(self):
        base = dict(sensor_count=3, hidden=4, t2v_dim=2)
        assert model.ModelConfig(**base, concat="both").concat_dim == 16
        assert model.ModelConfig(**base, concat="global").concat_dim == 4
        assert model.ModelConfig(**base, concat="local").concat_dim == 12
        assert model.ModelConfig(**base, static_count=2).concat_dim == 20

    def test_validation_messages(self):
        with pytest.raises(ValueError, match="sensor_count"):
            model.ModelConfig(sensor_count=0).validate()
        with pytest.raises(ValueError, match="aggregation"):
            model.ModelConfig(sensor_count=1, aggregation="median").validate()
        with pytest.raises(ValueError, match="concat"):
            model.ModelConfig(sensor_count=1, concat="none").validate()
        with pytest.raises(ValueError, match="state_init"):
            model.ModelConfig(sensor_count=1, state_init="ones").validate()


class TestInit:
    def test_same_seed_is_bitwise_identical(self):
        cfg = model.ModelConfig(sensor_count=2, hidden=6, t2v_dim=3,
                                aggregation="attention", seed=5)
        a = model.init_params(cfg)
        b = model.init_params(cfg)
        assert set(a.tensors) == set(b.tensors)
        for name in a.tensors:
            np.testing.assert_array_equal(a[name].value, b[name].value)

    def test_biases_start_at_zero(self):
        params = model.init_params(model.ModelConfig(sensor_count=2, hidden=4,
                                                     t2v_dim=2, static_count=1,
                                                     aggregation="attention"))
        for name in ("sensor.0.decay.b", "sensor.1.cell.b", "head.b",
                     "static.b", "attention.b"):
            np.testing.assert_array_equal(params[name].value,
                                          np.zeros_like(params[name].value))

    def test_weight_variance_tracks_the_fan_bound(self):
        params = model.init_params(model.ModelConfig(sensor_count=1, hidden=32,
                                                     t2v_dim=8, seed=0))
        for name, fan in (("sensor.0.cell.V", (32, 32)),
                          ("sensor.0.decay.V", (8, 32))):
            bound = np.sqrt(6.0 / sum(fan))
            ratio = params[name].value.var() / (bound * bound / 3.0)
            assert 0.8 < ratio < 1.2, f"{name}: variance ratio {ratio:.3f}"

    def test_state_init_schemes(self):
        zeros = model.init_params(model.ModelConfig(sensor_count=2, hidden=4,
                                                    t2v_dim=2))
        np.testing.assert_array_equal(zeros.h0, np.zeros((2, 4)))
        np.testing.assert_array_equal(zeros.c0, np.zeros(4))
        rand = model.init_params(model.ModelConfig(sensor_count=2, hidden=4,
                                                   t2v_dim=2,
                                                   state_init="random", seed=1))
        assert np.any(rand.h0 != 0.0) and np.any(rand.c0 != 0.0)
        assert np.all(np.abs(rand.h0) < 1.0)


class TestBlocks:
    def test_time2vec_periodicity(self):
        omega = np.array([0.5, 1.25])
        phi = np.array([0.3, 1.1])
        base = model.time2vec(omega, phi, 0.7)
        for k in range(2):
            shifted = model.time2vec(omega, phi, 0.7 + 2.0 * np.pi / omega[k])
            np.testing.assert_allclose(shifted[k], base[k], rtol=0, atol=1e-12)

    def test_time2vec_constant_frequency(self):
        out = model.time2vec(np.zeros(4), np.full(4, np.pi / 2.0), 123.456)
        np.testing.assert_array_equal(out, np.ones(4))

    def test_decay_gates_range_and_zero(self):
        params = model.init_params(model.ModelConfig(sensor_count=1, hidden=8,
                                                     t2v_dim=4, seed=2))
        gates = model.decay_gates(params, 0, x=1.7, delta=2.5)
        assert gates.shape == (3, 8)
        assert np.all(np.abs(gates) < 1.0)
        for name in ("decay.W", "decay.V", "decay.b"):
            params[f"sensor.0.{name}"].value[...] = 0.0
        np.testing.assert_array_equal(model.decay_gates(params, 0, 1.7, 2.5),
                                      np.zeros((3, 8)))


class TestRollout:
    @pytest.mark.parametrize("agg", model.AGGREGATIONS)
    def test_matches_numpy_recomputation(self, golden_instance, agg):
        sched = data.build_schedule(golden_instance, 3)
        cfg = model.ModelConfig(sensor_count=3, hidden=4, t2v_dim=3,
                                aggregation=agg, seed=7)
        params = model.init_params(cfg)
        roll = model.forward(params, sched)
        np.testing.assert_array_equal(roll.logit_values(),
                                      numpy_rollout(params, sched))

    def test_golden_structure(self, golden_instance):
        sched = data.build_schedule(golden_instance, 3)
        params = model.init_params(model.ModelConfig(sensor_count=3, hidden=4,
                                                     t2v_dim=3, seed=7))
        roll = model.forward(params, sched)
        assert roll.activations == [
            [(0, 0.0), (2, 0.0)],
            [(1, 0.0), (2, 1.0)],
            [(0, 2.0)],
            [(0, 1.0), (1, 2.0)],
        ]
        assert roll.concat_parts == [("summary", 3), ("hidden", 0, 3),
                                     ("hidden", 1, 3), ("hidden", 2, 1)]
        assert roll.logit_values().shape == (2,)

    def test_statics_enter_the_head(self, golden_instance):
        sched = data.build_schedule(golden_instance, 3)
        cfg = model.ModelConfig(sensor_count=3, hidden=4, t2v_dim=3,
                                static_count=2, seed=7)
        params = model.init_params(cfg)
        statics = np.array([0.5, -1.0])
        roll = model.forward(params, sched, statics)
        assert roll.concat_parts[-1] == ("static",)
        np.testing.assert_array_equal(roll.logit_values(),
                                      numpy_rollout(params, sched, statics))
        other = model.forward(params, sched, np.array([0.5, 1.0]))
        assert np.any(other.logit_values() != roll.logit_values())

    @pytest.mark.parametrize("concat", model.CONCATS)
    def test_concat_variants(self, golden_instance, concat):
        sched = data.build_schedule(golden_instance, 3)
        cfg = model.ModelConfig(sensor_count=3, hidden=4, t2v_dim=3,
                                concat=concat, seed=7)
        params = model.init_params(cfg)
        roll = model.forward(params, sched)
        kinds = [lab[0] for lab in roll.concat_parts]
        if concat == "global":
            assert kinds == ["summary"]
        elif concat == "local":
            assert kinds == ["hidden"] * 3
        else:
            assert kinds == ["summary", "hidden", "hidden", "hidden"]
        np.testing.assert_array_equal(roll.logit_values(),
                                      numpy_rollout(params, sched))

    def test_grouping_canonicalizes_event_order(self):
        a = data.IstsInstance("a", [data.Observation(1.0, 2, 5.0),
                                    data.Observation(1.0 + 1e-10, 0, 3.0)], 1)
        b = data.IstsInstance("b", [data.Observation(1.0, 0, 3.0),
                                    data.Observation(1.0 + 1e-10, 2, 5.0)], 1)
        sa = data.build_schedule(a, 3)
        sb = data.build_schedule(b, 3)
        assert sa.to_bytes() == sb.to_bytes()
        params = model.init_params(model.ModelConfig(sensor_count=3, hidden=4,
                                                     t2v_dim=2, seed=3))
        np.testing.assert_array_equal(model.forward(params, sa).logit_values(),
                                      model.forward(params, sb).logit_values())


class TestInactiveSensor:
    def test_unobserved_sensor_is_untouched(self):
        """No gradient reaches, and no state change touches, a sensor that
        never fires; its head input stays the initial hidden state."""
        inst = data.IstsInstance("partial", [
            data.Observation(0.0, 0, 1.0),
            data.Observation(1.0, 1, -2.0),
            data.Observation(2.5, 0, 0.5),
        ], label=1)
        sched = data.build_schedule(inst, 3)
        cfg = model.ModelConfig(sensor_count=3, hidden=4, t2v_dim=2,
                                state_init="random", seed=9)
        params = model.init_params(cfg)
        h0_before = params.h0.copy()

        roll, loss = model.forward_loss(params, sched, 1)
        loss.tape.backward(loss)
        grads = {p.name: g for p, g in loss.tape.param_grads()}

        idle = [name for name in params.tensors if name.startswith("sensor.2.")]
        assert len(idle) == 8
        for name in idle:
            assert name not in grads        # structurally zero: never taped
        for name in ("sensor.0.cell.W", "sensor.1.cell.W", "head.W"):
            assert np.any(grads[name] != 0.0)

        assert params.h0.tobytes() == h0_before.tobytes()
        assert ("hidden", 2, None) in roll.concat_parts


class TestAggregation:
    def test_mean_of_two_states(self):
        out = model.aggregate_values("mean", [np.array([1.0, 3.0]),
                                              np.array([3.0, 1.0])])
        np.testing.assert_array_equal(out, [2.0, 2.0])

    def test_max_is_elementwise(self):
        out = model.aggregate_values("max", [np.array([1.0, 3.0]),
                                             np.array([3.0, 1.0])])
        np.testing.assert_array_equal(out, [3.0, 3.0])

    def test_singleton_is_identity_for_every_kind(self):
        state = np.array([0.4, -1.2, 0.7])
        att_w = np.array([[0.3, -0.2, 0.8]])
        att_b = np.array([0.1])
        for kind in model.AGGREGATIONS:
            out = model.aggregate_values(kind, [state], att_w, att_b)
            np.testing.assert_array_equal(out, state)

    def test_equal_scores_reduce_to_mean(self):
        rng = np.random.default_rng(31)
        states = [rng.normal(size=5) for _ in range(4)]
        att = model.aggregate_values("attention", states,
                                     np.zeros((1, 5)), np.zeros(1))
        mean = model.aggregate_values("mean", states)
        np.testing.assert_array_equal(att, mean)

    def test_attention_weights_sum_to_one(self):
        rng = np.random.default_rng(33)
        inst = make_random_instance(rng, 4, 8)
        sched = data.build_schedule(inst, 4)
        params = model.init_params(model.ModelConfig(
            sensor_count=4, hidden=5, t2v_dim=3, aggregation="attention", seed=1))
        roll = model.forward(params, sched)
        assert len(roll.attention) == len(sched)
        for weights, step in zip(roll.attention, sched.steps):
            assert weights.shape == (len(step),)
            np.testing.assert_allclose(weights.sum(), 1.0, rtol=0, atol=1e-12)

    def test_empty_states_raise(self):
        with pytest.raises(ValueError, match="at least one"):
            model.aggregate_values("mean", [])


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        cfg = model.ModelConfig(sensor_count=2, hidden=5, t2v_dim=3,
                                static_count=1, aggregation="attention",
                                state_init="random", seed=13)
        params = model.init_params(cfg)
        extra_arrays = {"mean": np.array([1.5, -0.25])}
        extra_json = {"seed": 13, "best_epoch": 4}
        path = tmp_path / "model.bin"
        params.save(path, extra_arrays, extra_json)

        loaded, arrays, info = model.SlanParams.load(path)
        assert loaded.config == cfg
        assert info == extra_json
        np.testing.assert_array_equal(arrays["mean"], extra_arrays["mean"])
        assert set(loaded.tensors) == set(params.tensors)
        for name in params.tensors:
            np.testing.assert_array_equal(loaded[name].value, params[name].value)
        np.testing.assert_array_equal(loaded.h0, params.h0)
        np.testing.assert_array_equal(loaded.c0, params.c0)

    def test_loaded_model_scores_identically(self, tmp_path, golden_instance):
        sched = data.build_schedule(golden_instance, 3)
        params = model.init_params(model.ModelConfig(sensor_count=3, hidden=4,
                                                     t2v_dim=2, seed=17))
        before = model.forward(params, sched).logit_values()
        params.save(tmp_path / "m.bin")
        loaded, _, _ = model.SlanParams.load(tmp_path / "m.bin")
        np.testing.assert_array_equal(model.forward(loaded, sched).logit_values(),
                                      before)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises((FileNotFoundError, OSError)):
            model.SlanParams.load(tmp_path / "nope.bin")


class TestKernelCache:
    def test_cache_hits_and_rebind_rebuilds(self):
        params = model.init_params(model.ModelConfig(sensor_count=1, hidden=4,
                                                     t2v_dim=2, seed=0))
        backend = kernels.get_backend()
        k1 = params.kernel(0, backend)
        assert params.kernel(0, backend) is k1
        params["sensor.0.cell.W"].value[...] *= 1.0       # in place: no rebuild
        assert params.kernel(0, backend) is k1
        p = params["sensor.0.cell.W"]
        p.value = p.value.copy()                          # rebind: rebuild
        assert params.kernel(0, backend) is not k1


class TestErrors:
    def test_unknown_sensor_in_schedule(self, golden_instance):
        sched = data.build_schedule(golden_instance)
        params = model.init_params(model.ModelConfig(sensor_count=2, hidden=4,
                                                     t2v_dim=2))
        with pytest.raises(ValueError, match="sensor 2.*2 sensors"):
            model.forward(params, sched)

    def test_static_count_mismatch(self, golden_instance):
        sched = data.build_schedule(golden_instance, 3)
        params = model.init_params(model.ModelConfig(sensor_count=3, hidden=4,
                                                     t2v_dim=2, static_count=2))
        with pytest.raises(ValueError, match="2 static features, got none"):
            model.forward(params, sched)
        with pytest.raises(ValueError, match="got 1"):
            model.forward(params, sched, np.array([1.0]))

    def test_divergence_names_step_and_sensor(self, golden_instance):
        sched = data.build_schedule(golden_instance, 3)
        params = model.init_params(model.ModelConfig(sensor_count=3, hidden=4,
                                                     t2v_dim=2, seed=1))
        params.c0 = np.full(4, np.nan)
        with pytest.raises(ad.AutodiffError, match=r"sensor 0 at step 0 \(t=0\.0\)"):
            model.forward(params, sched)

    def test_positive_probability(self):
        assert model.positive_probability(np.array([0.0, 0.0])) == 0.5
        assert model.positive_probability(np.array([-1000.0, 1000.0])) == 1.0
        big = model.positive_probability(np.array([1000.0, -1000.0]))
        assert 0.0 <= big < 1e-12
