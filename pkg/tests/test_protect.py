import math

import numpy as np
import pytest

import seu_forge as sf
from seu_forge import bits
from seu_forge.protect import (PT_LEVELS, AbsorptionError, EqualizationError,
                               ProtectionTarget, absorb_bias,
                               classify_candidate, cross_layer_equalize,
                               danger_bit, evaluate_protection,
                               protect_parameters, recondition_bn,
                               suggest_cle_scales)


def word_of(value):
    return bits.f32_to_bits(float(np.float32(value)))


class TestClassify:
    def test_full_exponent(self):
        cls = classify_candidate(word_of(1.5))
        assert cls.candidate and cls.allow_increment and cls.allow_decrement

    def test_exp_126_blocked_both_ways(self):
        cls = classify_candidate(word_of(0.75))
        assert cls.candidate and cls.label == "non-protectable"

    def test_exp_125_decrement_only(self):
        cls = classify_candidate(word_of(0.3))  # exponent 01111101
        assert cls.candidate and not cls.allow_increment and cls.allow_decrement

    def test_exp_0x80_omitted(self):
        cls = classify_candidate(word_of(2.5))
        assert not cls.candidate and cls.label == "non-protectable"

    def test_not_candidates(self):
        assert not classify_candidate(word_of(5.0)).candidate       # exp 10000001
        assert not classify_candidate(word_of(0.0)).candidate       # zero
        assert not classify_candidate(word_of(1e-40)).candidate     # subnormal
        assert not classify_candidate(word_of(0.04)).candidate      # exp 01111010

    def test_partial_candidates_all_exponents(self):
        # exponents with exactly one low-7 zero: 63, 95, 111, 119, 123, 125, 126
        for exp, inc, dec in [(63, True, True), (95, True, True), (111, True, True),
                              (119, True, True), (123, True, True),
                              (125, False, True), (126, False, False)]:
            cls = classify_candidate(bits.assemble_f32(0, exp, 1234))
            assert cls.candidate
            assert cls.allow_increment == inc and cls.allow_decrement == dec

    def test_nan_inf_rejected(self):
        with pytest.raises(ValueError):
            classify_candidate(word_of(math.inf))
        with pytest.raises(ValueError):
            classify_candidate(word_of(math.nan))

    def test_candidate_set_closed_form_over_all_exponents(self):
        # candidates are exactly the exponents one low-7 flip from filled
        expected = {63, 95, 111, 119, 123, 125, 126, 127}
        for exp in range(0, 255):
            cls = classify_candidate(bits.assemble_f32(0, exp, 0x2A))
            assert cls.candidate == (exp in expected), exp
            if exp >= 0x80:
                assert not cls.candidate

    def test_danger_bits(self):
        assert danger_bit(word_of(1.5)) == 30
        assert danger_bit(word_of(0.1)) == 25   # low-7 zero at position 2
        assert danger_bit(word_of(0.75)) == 23


class TestProtectionTarget:
    def test_levels(self):
        assert PT_LEVELS[1].full_threshold == 1.999
        assert PT_LEVELS[1].empty_threshold == 1.001
        assert PT_LEVELS[2] == ProtectionTarget("PT2", 1.99, 1.01)
        assert (PT_LEVELS[3].full_threshold, PT_LEVELS[3].empty_threshold) == (1.95, 1.05)
        assert (PT_LEVELS[4].full_threshold, PT_LEVELS[4].empty_threshold) == (1.9, 1.1)

    def test_threshold_ordering_enforced(self):
        with pytest.raises(ValueError):
            ProtectionTarget("bad", 1.0, 1.5)


class TestProtectParameters:
    def _planted_graph(self):
        g = sf.generate_toy_weights(sf.build_unet(2, 4, 3, 3), 5)
        flat = g.layer_params("conv2D")["conv_kernel"].tensor.flat
        flat[0] = np.float32(1.99951)    # PT1 full-mantissa case
        flat[1] = np.float32(1.0)        # PT1 empty-mantissa case
        flat[2] = np.float32(0.75)       # non-protectable
        flat[3] = np.float32(-1.9995)    # negative full-mantissa
        return g

    def test_spec_increment_example(self):
        g = self._planted_graph()
        prot, report = protect_parameters(g, PT_LEVELS[1])
        assert prot.layer_params("conv2D")["conv_kernel"].tensor.flat[0] == 2.0

    def test_spec_decrement_example(self):
        g = self._planted_graph()
        prot, report = protect_parameters(g, PT_LEVELS[1])
        v = prot.layer_params("conv2D")["conv_kernel"].tensor.flat[1]
        assert v == np.float32(0.99999994)
        word = int(np.asarray(v, np.float32).view(np.uint32))
        assert bits.exponent_field(word) == 0x7E
        assert bits.mantissa_field(word) == bits.F32_MANT_MASK

    def test_non_protectable_untouched(self):
        g = self._planted_graph()
        prot, report = protect_parameters(g, PT_LEVELS[1])
        assert prot.layer_params("conv2D")["conv_kernel"].tensor.flat[2] == 0.75
        recs = {(r.pset, r.element): r for r in report.records}
        rec = recs[(1, 2)]
        assert rec.rule == "skipped non-protectable"

    def test_negative_value_sign_untouched(self):
        g = self._planted_graph()
        prot, _ = protect_parameters(g, PT_LEVELS[1])
        assert prot.layer_params("conv2D")["conv_kernel"].tensor.flat[3] == -2.0

    def test_risky_count_never_increases(self):
        g = self._planted_graph()
        for pt in (1, 2, 3, 4):
            prot, _ = protect_parameters(g, PT_LEVELS[pt])
            assert sf.risky_pattern_count(prot) <= sf.risky_pattern_count(g)

    def test_delta_bounds(self):
        g = self._planted_graph()
        for pt in (1, 2, 3, 4):
            target = PT_LEVELS[pt]
            _, report = protect_parameters(g, target)
            inc_bound = 2.0 / target.full_threshold - 1.0
            dec_bound = 1.0 - target.empty_threshold / 2.0
            for r in report.applied():
                if r.rule.startswith("exponent++"):
                    assert 0 <= r.relative_delta <= inc_bound + 1e-12
                else:
                    assert 0 <= -r.relative_delta <= dec_bound + 1e-12

    def test_idempotent(self):
        g = self._planted_graph()
        prot, _ = protect_parameters(g, PT_LEVELS[2])
        again, report = protect_parameters(prot, PT_LEVELS[2])
        assert not report.applied()
        assert sf.model_hash(again) == sf.model_hash(prot)

    def test_protected_positions_flip_safe(self):
        g = self._planted_graph()
        prot, report = protect_parameters(g, PT_LEVELS[2])
        for r in report.applied():
            for bit in range(23, 31):
                v = bits.bits_to_f32(bits.flip_bit_f32(r.after_bits, bit))
                assert math.isfinite(v)

    def test_pt_hierarchy_monotone_candidates(self):
        g = self._planted_graph()
        protected = [len(protect_parameters(g, PT_LEVELS[pt])[1].applied())
                     for pt in (1, 2, 3, 4)]
        assert protected == sorted(protected)

    def test_roles_filter(self):
        g = self._planted_graph()
        _, report = protect_parameters(g, PT_LEVELS[4], roles=("bn_gamma",))
        assert all(g.param(r.pset).role == "bn_gamma" for r in report.records)

    def test_report_jsonl(self, tmp_path):
        g = self._planted_graph()
        _, report = protect_parameters(g, PT_LEVELS[1])
        path = tmp_path / "report.jsonl"
        report.write_jsonl(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == len(report.records)
        s = report.summary()
        assert s["candidates"] == len(report.records)
        assert s["protected"] == len(report.applied())


class TestEvaluateProtection:
    def test_zero_candidate_pt_identical_metrics(self, tiny_inputs):
        g = sf.generate_toy_weights(sf.build_unet(2, 4, 3, 3), 5)
        # convtr biases are zeroed: no candidates in the targeted roles
        for p in g.params_of(roles=("convtr_bias",)):
            p.tensor.data[...] = 0.0
        prot, report = protect_parameters(g, PT_LEVELS[4], roles=("convtr_bias",))
        assert not report.applied()
        ev = evaluate_protection(g, prot, tiny_inputs[0], bit_filter={30})
        assert ev.faultless["original"] == ev.faultless["protected"]
        for row in ev.per_bit:
            assert row["original"] == row["protected"]

    def test_planted_gamma_nan_eliminated(self, tiny_inputs):
        g = sf.generate_toy_weights(sf.build_unet(2, 4, 3, 3), 5)
        gamma = g.layer_params("bn")["bn_gamma"].tensor
        gamma.data[...] = np.float32(1.9995)  # all full-risky, PT2-protectable
        prot, report = protect_parameters(g, PT_LEVELS[2], roles=("bn_gamma",))
        assert len(report.applied()) >= gamma.data.size
        ev = evaluate_protection(g, prot, tiny_inputs[0], bit_filter={30})
        row = next(r for r in ev.per_bit if r["bit"] == 30)
        # original model: bit-30 flip of gamma in (1,2) -> NaN -> 100% error
        assert row["original"]["error_rate"] >= 99.0
        # protected gammas are 2.0 (exp 0x80): flips stay finite
        assert row["protected"]["error_rate"] < row["original"]["error_rate"]

    def test_faultless_giou_baseline(self, tiny_graph, tiny_inputs):
        ev = evaluate_protection(tiny_graph, tiny_graph, tiny_inputs[0],
                                 bit_filter=set())
        assert ev.faultless["original"]["giou"] == 100.0
        assert ev.faultless["original"]["error_rate"] == 0.0


class TestReconditionBn:
    def test_identity_strategy(self, tiny_graph):
        out, report = recondition_bn(tiny_graph, strategy="identity")
        assert report["channels_changed"] == 0
        assert sf.model_hash(out) == sf.model_hash(tiny_graph)

    def test_pow2_move_preserves_function(self, tiny_graph, tiny_batch):
        g = tiny_graph.copy()
        g.layer_params("bn")["bn_gamma"].tensor.data[0] = np.float32(1.0005)
        out, report = recondition_bn(g)
        assert report["channels_changed"] >= 1
        assert report["risky_after"] <= report["risky_before"]
        a = sf.run_float(g, tiny_batch)
        b = sf.run_float(out, tiny_batch)
        scale = np.abs(a.logits.data).max()
        assert np.abs(a.logits.data - b.logits.data).max() <= 1e-6 * scale
        assert np.array_equal(a.class_map, b.class_map)

    def test_joint_move_algebra(self):
        # gamma'=2*gamma, sigma'=4*sigma+3*eps keeps W=gamma/sqrt(sigma+eps)
        gamma, sigma, eps = np.float32(1.0005), np.float32(0.37), np.float32(1e-3)
        w = gamma / np.sqrt(np.float64(sigma) + np.float64(eps))
        g2 = np.float32(2.0) * gamma
        s2 = np.float32(4.0) * np.float32(sigma + eps) - eps
        w2 = g2 / np.sqrt(np.float64(s2) + np.float64(eps))
        assert abs(w2 - w) / w < 1e-6

    def test_risky_gamma_moved_out(self):
        g = sf.generate_toy_weights(sf.build_unet(2, 4, 3, 3), 5)
        gamma = g.layer_params("bn")["bn_gamma"].tensor
        gamma.data[0] = np.float32(1.0005)
        out, _ = recondition_bn(g)
        new_word = int(out.layer_params("bn")["bn_gamma"].tensor.flat.view(np.uint32)[0])
        assert not classify_candidate(new_word).candidate

    def test_rejects_folded(self, tiny_graph):
        folded = sf.fold_bn(tiny_graph)
        with pytest.raises(ValueError, match="unfolded"):
            recondition_bn(folded)


class TestCLE:
    def test_all_ones_identity(self, tiny_graph, tiny_batch):
        folded = sf.fold_bn(tiny_graph)
        out = cross_layer_equalize(folded, np.ones(4, np.float32), "conv2D", "conv2D_1")
        a = sf.run_float(folded, tiny_batch).logits.data
        b = sf.run_float(out, tiny_batch).logits.data
        assert np.array_equal(a, b)

    def test_pow2_scales_bit_exact(self, tiny_graph, tiny_batch):
        folded = sf.fold_bn(tiny_graph)
        s = np.array([2.0, 0.5, 4.0, 1.0], np.float32)
        out = cross_layer_equalize(folded, s, "conv2D", "conv2D_1")
        a = sf.run_float(folded, tiny_batch).logits.data
        b = sf.run_float(out, tiny_batch).logits.data
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32))

    def test_scalar_pair_equivalence(self, tiny_graph, tiny_batch):
        folded = sf.fold_bn(tiny_graph)
        s = np.full(4, 3.0, np.float32)  # non-pow2: fp tolerance applies
        out = cross_layer_equalize(folded, s, "conv2D", "conv2D_1")
        a = sf.run_float(folded, tiny_batch).logits.data
        b = sf.run_float(out, tiny_batch).logits.data
        assert np.abs(a - b).max() <= 1e-6 * max(1.0, np.abs(a).max())

    def test_negative_scale_rejected(self, tiny_graph):
        folded = sf.fold_bn(tiny_graph)
        s = np.array([2.0, -1.0, 1.0, 1.0], np.float32)
        with pytest.raises(EqualizationError, match="positive"):
            cross_layer_equalize(folded, s, "conv2D", "conv2D_1")

    def test_unsupported_path_rejected(self, tiny_graph):
        folded = sf.fold_bn(tiny_graph)
        # conv2D_1 feeds maxpool AND the skip concat: multiple consumers
        with pytest.raises(EqualizationError, match="consumers"):
            cross_layer_equalize(folded, np.ones(4, np.float32), "conv2D_1", "conv2D_2")

    def test_unfolded_pair_blocked_by_bn(self, tiny_graph):
        with pytest.raises(EqualizationError, match="batchnorm|unsupported"):
            cross_layer_equalize(tiny_graph, np.ones(4, np.float32), "conv2D", "conv2D_1")

    def test_suggested_scales_positive(self, tiny_graph):
        folded = sf.fold_bn(tiny_graph)
        s = suggest_cle_scales(folded, "conv2D", "conv2D_1")
        assert (s > 0).all()
        assert np.allclose(np.log2(s), np.rint(np.log2(s)))  # powers of two


class TestAbsorbBias:
    @pytest.fixture()
    def folded(self, tiny_graph):
        return sf.fold_bn(tiny_graph)

    def _pair(self, folded):
        convs = [l.name for l in folded.layers if l.kind == "conv2d"]
        return convs[-1], folded.output_layer.name

    def test_zero_amounts_identity(self, folded, tiny_inputs, tiny_batch):
        n, n1 = self._pair(folded)
        cout = folded.layer_params(n)["conv_bias"].tensor.size
        out = absorb_bias(folded, np.zeros(cout, np.float32), n, n1, tiny_inputs[0])
        a = sf.run_float(folded, tiny_batch).logits.data
        b = sf.run_float(out, tiny_batch).logits.data
        assert np.array_equal(a, b)

    def test_valid_absorption_preserves_maps(self, folded, tiny_inputs, tiny_batch):
        n, n1 = self._pair(folded)
        pre = sf.run_float(folded, tiny_batch, collect=(n,)).collected[n].data
        min_pre = pre.min(axis=(0, 1, 2))
        c = np.where(min_pre > 0,
                     2.0 ** np.floor(np.log2(np.maximum(min_pre, 1e-30))),
                     0.0).astype(np.float32)
        out = absorb_bias(folded, c, n, n1, tiny_inputs[0])
        a = sf.run_float(folded, tiny_batch)
        b = sf.run_float(out, tiny_batch)
        assert np.array_equal(a.class_map, b.class_map)
        # the bias actually moved
        if (c > 0).any():
            assert not np.array_equal(
                folded.layer_params(n)["conv_bias"].tensor.data,
                out.layer_params(n)["conv_bias"].tensor.data)

    def test_violation_refused_with_channels(self, folded, tiny_inputs):
        n, n1 = self._pair(folded)
        cout = folded.layer_params(n)["conv_bias"].tensor.size
        with pytest.raises(AbsorptionError, match="channels"):
            absorb_bias(folded, np.full(cout, 100.0, np.float32), n, n1, tiny_inputs[0])

    def test_negative_amounts_refused(self, folded, tiny_inputs):
        n, n1 = self._pair(folded)
        cout = folded.layer_params(n)["conv_bias"].tensor.size
        with pytest.raises(AbsorptionError, match="negative"):
            absorb_bias(folded, np.full(cout, -0.5, np.float32), n, n1, tiny_inputs[0])

    def test_padded_consumer_refused(self, folded, tiny_inputs):
        with pytest.raises(AbsorptionError, match="border"):
            absorb_bias(folded, np.zeros(4, np.float32), "conv2D", "conv2D_1",
                        tiny_inputs[0])

    def test_identity_activation_any_amount(self, tiny_inputs):
        # hand graph: conv -> output conv (1x1), no relu between: linearity
        rng = np.random.Generator(np.random.PCG64(4))
        layers = [
            sf.LayerSpec("conv2d", "a", {"kernel_size": 1, "stride": 1,
                                         "padding": "same", "filters": 3}, ["input"]),
            sf.LayerSpec("output_conv", "o", {"kernel_size": 1, "stride": 1,
                                              "padding": "same", "filters": 2}, ["a"]),
        ]
        t = lambda arr: sf.Tensor.from_array(np.asarray(arr, np.float32))
        params = [
            sf.ParamSet(1, "a", "conv_kernel", t(rng.normal(size=(1, 1, 3, 3)))),
            sf.ParamSet(2, "a", "conv_bias", t(rng.normal(size=3))),
            sf.ParamSet(3, "o", "conv_kernel", t(rng.normal(size=(1, 1, 3, 2)))),
            sf.ParamSet(4, "o", "conv_bias", t(rng.normal(size=2))),
        ]
        g = sf.ModelGraph(layers, params, 2, {"input_channels": 3})
        c = np.array([-1.5, 0.75, 2.0], np.float32)  # negatives fine: no ReLU
        out = absorb_bias(g, c, "a", "o", tiny_inputs[0])
        batch = sf.batch_inputs(tiny_inputs[0])
        a = sf.run_float(g, batch)
        b = sf.run_float(out, batch)
        assert np.array_equal(a.class_map, b.class_map)
