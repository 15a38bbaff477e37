import math

import pytest
from hypothesis import given, strategies as st

from unkad.model import (
    ANNOTATED,
    HIDDEN,
    Box,
    Detection,
    GroundTruthObject,
    LabelSpace,
    LabelSpaceViolation,
    RegionProposal,
    check_truth_consistent,
    validate_label_space,
)


def boxes(min_coord=-1e3, max_coord=1e3):
    coord = st.floats(min_coord, max_coord, allow_nan=False)
    size = st.floats(1e-3, 500.0, allow_nan=False)
    return st.builds(
        lambda x, y, w, h: Box(x, y, x + w, y + h), coord, coord, size, size
    )


class TestBox:
    def test_valid(self):
        b = Box(0, 0, 10, 5)
        assert b.width == 10 and b.height == 5 and b.area == 50

    @pytest.mark.parametrize("coords", [(5, 0, 5, 10), (0, 3, 10, 3), (6, 0, 5, 10)])
    def test_degenerate_rejected(self, coords):
        with pytest.raises(ValueError):
            Box(*coords)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_nonfinite_rejected(self, bad):
        with pytest.raises(ValueError):
            Box(0, 0, bad, 10)


class TestLabelSpace:
    def test_with_known_layout(self):
        space = LabelSpace.with_known(20, has_unknown_class=True)
        assert space.known_classes == tuple(range(20))
        assert space.background_id == 20 and space.unknown_id == 21
        assert space.logit_width == 22
        assert LabelSpace.with_known(20, has_unknown_class=False).logit_width == 21

    def test_slot_roundtrip(self):
        space = LabelSpace.with_known(3, has_unknown_class=True)
        for slot in range(space.logit_width):
            assert space.slot_of(space.class_at_slot(slot)) == slot

    def test_no_unknown_slot_without_flag(self):
        space = LabelSpace.with_known(3, has_unknown_class=False)
        with pytest.raises(LabelSpaceViolation):
            _ = space.unknown_slot

    def test_invariants(self):
        with pytest.raises(ValueError):
            LabelSpace((), 1, 2, False)
        with pytest.raises(ValueError):
            LabelSpace((0, 0), 1, 2, False)
        with pytest.raises(ValueError):
            LabelSpace((0, 1), 1, 2, False)
        with pytest.raises(ValueError):
            LabelSpace((0,), 1, 1, False)


class TestValidateLabelSpace:
    def test_unknown_head_width_22(self):
        validate_label_space(LabelSpace.with_known(20, True), 22)

    def test_standard_head_width_21(self):
        validate_label_space(LabelSpace.with_known(20, False), 21)

    def test_missing_unknown_slot(self):
        with pytest.raises(LabelSpaceViolation, match="22.*21|21.*22"):
            validate_label_space(LabelSpace.with_known(20, True), 21)


class TestRecords:
    def test_objectness_range(self):
        with pytest.raises(ValueError):
            RegionProposal(Box(0, 0, 1, 1), (0.0,), objectness=1.5)

    def test_unscored_allowed(self):
        p = RegionProposal(Box(0, 0, 1, 1), (0.0, 1.0))
        assert not p.scored()

    def test_visibility_checked(self):
        with pytest.raises(ValueError):
            GroundTruthObject(Box(0, 0, 1, 1), 0, "occluded")

    def test_truth_consistency(self):
        space = LabelSpace.with_known(3, True)
        check_truth_consistent(space, GroundTruthObject(Box(0, 0, 1, 1), 4, HIDDEN))
        check_truth_consistent(space, GroundTruthObject(Box(0, 0, 1, 1), 1, ANNOTATED))
        with pytest.raises(ValueError):
            check_truth_consistent(space, GroundTruthObject(Box(0, 0, 1, 1), 4, ANNOTATED))
        with pytest.raises(ValueError):
            # annotated objects always carry a known class
            check_truth_consistent(space, GroundTruthObject(Box(0, 0, 1, 1), 3, ANNOTATED))

    def test_detection_confidence_finite(self):
        with pytest.raises(ValueError):
            Detection(Box(0, 0, 1, 1), 0, math.nan, 0.5)


@given(boxes())
def test_box_fields_roundtrip(b):
    assert Box(b.x_min, b.y_min, b.x_max, b.y_max) == b
