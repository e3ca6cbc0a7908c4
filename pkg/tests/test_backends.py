"""
Unit tests for the reference and optimized interpreters
"""

import numpy as np
import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from model_ir import GraphBuilder
from optimized_backend import (
    BUG_CATALOG,
    CODE_SHAPE,
    CODE_UNSUPPORTED,
    CODE_WRITE_CHECK,
    STANDARD_DEFECTS,
    ConversionError,
    convert,
    plan_execution,
    run_optimized,
    validate_bug_mask,
)
from reference_backend import InferenceFault, avg_pool, cast, max_pool, run_reference
from tensors import synthesize_inputs
from triage import compare
from utils.validators import ValidationError

WINDOW = dict(kernel_h=3, kernel_w=3, stride_h=1, stride_w=1, pad_h=1, pad_w=1)
CONV = dict(WINDOW, filters=4, dilation_h=1, dilation_w=1)


def mixed_model():
    """One model touching every kernel that has no NaN path."""
    b = GraphBuilder()
    x = b.input([1, 6, 6, 2])
    r = b.op('Relu', b.op('BiasAdd', b.op('Conv2d', x, **CONV)))
    d = b.op('DepthwiseConv2d', x, depth_multiplier=2, dilation_h=1, dilation_w=1, **WINDOW)
    mp = b.op('MaxPool', d, **WINDOW)
    b.op('AvgPool', r, **dict(WINDOW, stride_h=2, stride_w=2))
    added = b.op('Add', b.op('Mul', r, mp), d)
    sm = b.op('Softmax', added, axis=3)
    cc = b.op('Concat', sm, mp, r, axis=3)
    b.op('Reshape', b.op('Transpose', cc, perm='0312'), mode='hw_to_w')
    sl = b.op('Slice', added, begin=[0, 1, 1, 0], size=[1, 4, 4, 4])
    padded = b.op('Pad', sl, pad_top=1, pad_bottom=0, pad_left=2, pad_right=1)
    b.op('Sigmoid', b.op('Sub', b.op('Tanh', padded), b.op('Relu6', padded)))
    b.op('Cast', b.op('Transpose', added, perm='0231'), to='i32')
    return b.build(weights_seed=11)


def witness(bug):
    """Smallest model on which ``bug`` changes the result."""
    b = GraphBuilder()
    if bug == 'pool-pad-corner':
        b.op('AvgPool', b.input([1, 4, 4, 1]), **WINDOW)
    elif bug == 'concat-drop':
        x = b.input([1, 4, 4, 2])
        b.op('Concat', x, x, x, axis=3)
    elif bug == 'cast-sat':
        b.op('Cast', b.input([1, 4, 4, 3]), to='i8')
    elif bug == 'fused-relu-skip':
        b.op('Relu', b.op('BiasAdd', b.op('Conv2d', b.input([1, 6, 6, 2]), **CONV)))
    elif bug == 'dilated-conv-tail':
        b.op('Conv2d', b.input([1, 8, 8, 2]), **dict(CONV, dilation_h=2, dilation_w=2, pad_h=2, pad_w=2))
    elif bug == 'sigmoid-nan':
        x = b.input([1, 4, 4, 2])
        zero = b.op('Sub', x, x)
        b.op('Sigmoid', b.op('RealDiv', zero, zero))
    elif bug == 'realdiv-zero':
        x = b.input([1, 4, 4, 2])
        b.op('RealDiv', x, b.op('Sub', x, x))
    elif bug == 'maxpool-pad-zero':
        x = b.input([1, 4, 4, 1])
        negative = b.op('Sub', b.op('Sub', x, x), b.op('Sigmoid', x))
        b.op('MaxPool', negative, **WINDOW)
    elif bug == 'muladd-fanout':
        x = b.input([1, 4, 4, 2])
        m = b.op('Mul', x, x)
        b.op('Add', m, x)
        b.op('Relu', m)
    elif bug == 'add-fanout-abort':
        x = b.input([1, 4, 4, 2])
        a = b.op('Add', x, x)
        for op in ('Relu', 'Sigmoid', 'Tanh'):
            b.op(op, a)
    elif bug == 'depthwise-order':
        b.op('DepthwiseConv2d', b.input([1, 5, 5, 2]), depth_multiplier=2,
             dilation_h=1, dilation_w=1, **WINDOW)
    elif bug == 'transpose-convert':
        b.op('Transpose', b.input([1, 4, 5, 3]), perm='0312')
    return b.build(weights_seed=5)


NUMERIC_BUGS = [name for name, bug in BUG_CATALOG.items() if bug.kind == 'numeric']


class TestReferenceKernels:
    """Test suite for reference operator semantics."""

    def test_avg_pool_excludes_padding(self):
        """Corner windows average only their real elements."""
        x = np.ones((1, 3, 3, 1))
        out = avg_pool(x, WINDOW)
        assert np.all(out == 1.0)

    def test_max_pool_pads_with_negative_infinity(self):
        """Padding never wins a max over negative inputs."""
        x = -np.ones((1, 3, 3, 1))
        assert np.all(max_pool(x, WINDOW) == -1.0)

    def test_cast_truncates_and_saturates(self):
        """NaN maps to 0, values truncate toward zero and saturate."""
        x = np.array([np.nan, 1.7, -1.7, 300.0, -300.0])
        assert cast(x, 'i8').tolist() == [0, 1, -1, 127, -128]
        assert cast(x, 'i8').dtype == np.int8

    def test_slice_out_of_bounds_faults(self):
        """An out-of-range slice is an inference fault."""
        b = GraphBuilder()
        b.op('Slice', b.input([1, 4, 4, 1]), begin=[0, 2, 0, 0], size=[1, 3, 4, 1])
        with pytest.raises(InferenceFault) as info:
            run_reference(b.build())
        assert info.value.kind == 'slice-bounds'
        assert info.value.op == 'Slice'

    def test_unknown_operator_faults(self):
        """Operators outside the catalog have no reference kernel."""
        b = GraphBuilder()
        b.op('Pow', b.input([1, 2, 2, 1]))
        with pytest.raises(InferenceFault, match="unsupported-op"):
            run_reference(b.build())

    def test_division_by_zero_is_ieee(self):
        """x / 0 gives signed infinities, not a fault."""
        result = run_reference(witness('realdiv-zero'))
        out = next(iter(result.outputs.values()))
        assert np.all(np.isinf(out) | np.isnan(out))

    def test_outputs_are_float32_sinks(self):
        """Outputs are keyed by sink id and rounded to float32."""
        m = mixed_model()
        result = run_reference(m)
        assert sorted(result.outputs) == m.outputs()
        float_outputs = [v for v in result.outputs.values() if v.dtype.kind == 'f']
        assert all(v.dtype == np.float32 for v in float_outputs)
        assert set(result.taps) == set(m.graph.node_ids)

    def test_deterministic(self):
        """The same model gives identical outputs twice."""
        m = mixed_model()
        first, second = run_reference(m), run_reference(m)
        for v in first.outputs:
            assert np.array_equal(first.outputs[v], second.outputs[v])


class TestCleanAgreement:
    """Without seeded bugs both interpreters agree exactly."""

    @pytest.mark.parametrize('fusion', [True, False])
    def test_mixed_model(self, fusion):
        """Every output is bit-identical to the reference."""
        m = mixed_model()
        inputs = synthesize_inputs(m)
        ref = run_reference(m, inputs)
        test = run_optimized(m, inputs, fusion=fusion)
        assert sorted(test.outputs) == sorted(ref.outputs)
        for v in ref.outputs:
            assert test.outputs[v].dtype == ref.outputs[v].dtype
            assert np.array_equal(test.outputs[v], ref.outputs[v])

    @pytest.mark.parametrize('bug', list(BUG_CATALOG))
    def test_witnesses_pass_without_bugs(self, bug):
        """Each witness model is clean when its defect is off."""
        m = witness(bug)
        inputs = synthesize_inputs(m)
        report = compare(run_reference(m, inputs).outputs, run_optimized(m, inputs).outputs)
        assert report.passed


class TestSeededBugs:
    """Each defect fires on its witness model."""

    @pytest.mark.parametrize('bug', NUMERIC_BUGS)
    def test_numeric_defect_diverges(self, bug):
        """Numeric defects lower RE below the threshold."""
        m = witness(bug)
        inputs = synthesize_inputs(m)
        ref = run_reference(m, inputs)
        test = run_optimized(m, inputs, bug_mask=[bug])
        assert not compare(ref.outputs, test.outputs).passed

    def test_abort_defect(self):
        """An Add with three consumers aborts."""
        with pytest.raises(InferenceFault) as info:
            run_optimized(witness('add-fanout-abort'), bug_mask=['add-fanout-abort'])
        assert info.value.kind == 'abort'
        assert info.value.op == 'Add'

    def test_convert_defect(self):
        """Transpose 0312 is rejected at conversion."""
        with pytest.raises(ConversionError) as info:
            run_optimized(witness('transpose-convert'), bug_mask=['transpose-convert'])
        assert info.value.code == CODE_WRITE_CHECK
        assert info.value.stage == 'convert'
        assert info.value.op == 'Transpose'

    def test_defect_needs_its_pattern(self):
        """A defect is silent on models without its pattern."""
        m = witness('concat-drop')
        inputs = synthesize_inputs(m)
        test = run_optimized(m, inputs, bug_mask=['cast-sat', 'dilated-conv-tail'])
        assert compare(run_reference(m, inputs).outputs, test.outputs).passed

    def test_dilated_tail_only_in_standalone_conv(self):
        """A dilated Conv2d fused with its BiasAdd runs the correct kernel."""
        b = GraphBuilder()
        conv = b.op('Conv2d', b.input([1, 8, 8, 2]), **dict(CONV, dilation_h=2, dilation_w=2, pad_h=2, pad_w=2))
        b.op('BiasAdd', conv)
        m = b.build(weights_seed=5)
        inputs = synthesize_inputs(m)
        test = run_optimized(m, inputs, bug_mask=['dilated-conv-tail'])
        assert test.regions[max(test.regions)] == 'Conv2d+BiasAdd'
        assert compare(run_reference(m, inputs).outputs, test.outputs).passed

    def test_standard_mask(self):
        """The standard mask is the first ten catalog entries."""
        assert len(STANDARD_DEFECTS) == 10
        assert 'transpose-convert' not in STANDARD_DEFECTS
        assert validate_bug_mask(STANDARD_DEFECTS) == frozenset(STANDARD_DEFECTS)

    def test_unknown_bug_rejected(self):
        """Unknown defect names are configuration errors."""
        with pytest.raises(ValidationError, match="no-such-bug"):
            validate_bug_mask(['no-such-bug'])


class TestConversion:
    """Test suite for the convert stage and fusion planning."""

    def test_unsupported_operator(self):
        """Operators outside the catalog fail conversion."""
        b = GraphBuilder()
        b.op('Pow', b.input([1, 2, 2, 1]))
        with pytest.raises(ConversionError) as info:
            convert(b.build())
        assert info.value.code == CODE_UNSUPPORTED
        assert info.value.op == 'Pow'

    def test_shape_error(self):
        """Operands that cannot be combined fail conversion."""
        b = GraphBuilder()
        b.op('Add', b.input([1, 2, 2, 1]), b.input([1, 3, 3, 1]))
        with pytest.raises(ConversionError) as info:
            convert(b.build())
        assert info.value.code == CODE_SHAPE

    def test_conv_bias_relu_fused(self):
        """Conv2d, BiasAdd and Relu run as one region."""
        plan = plan_execution(witness('fused-relu-skip'))
        patterns = [r.pattern for r in plan.regions]
        assert 'Conv2d+BiasAdd+Relu' in patterns

    def test_fusion_off(self):
        """Without fusion every node is its own region."""
        m = witness('fused-relu-skip')
        plan = plan_execution(m, fusion=False)
        assert len(plan.regions) == m.graph.node_count

    def test_fanout_blocks_fusion(self):
        """A Mul with other consumers is not fused."""
        plan = plan_execution(witness('muladd-fanout'))
        assert 'Mul+Add' not in [r.pattern for r in plan.regions]

    def test_fusion_refused_when_cyclic(self):
        """A fusion that would make the kernel graph cyclic is skipped."""
        b = GraphBuilder()
        x = b.input([1, 4, 4, 2])
        m = b.op('Mul', x, x)
        b.op('Add', m, b.op('Relu', m))
        model = b.build(weights_seed=3)
        plan = plan_execution(model, bugs=frozenset({'muladd-fanout'}))
        assert 'Mul+Add' not in [r.pattern for r in plan.regions]
        inputs = synthesize_inputs(model)
        test = run_optimized(model, inputs, bug_mask=['muladd-fanout'])
        assert compare(run_reference(model, inputs).outputs, test.outputs).passed

    def test_taps_are_region_outputs(self):
        """Only region outputs are observable."""
        m = witness('fused-relu-skip')
        conv, relu = 1, 3
        fused = run_optimized(m)
        assert relu in fused.taps and conv not in fused.taps
        assert fused.regions[relu] == 'Conv2d+BiasAdd+Relu'
        unfused = run_optimized(m, fusion=False)
        assert conv in unfused.taps
