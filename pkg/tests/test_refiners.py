from __future__ import annotations

import numpy as np
import pytest

from masktrack import (
    AugmentationParams,
    BinaryMask,
    DeformationParams,
    Image,
    ScoreMap,
    TrainingSample,
)
from masktrack.refiners import (
    ExternalRefiner,
    IdentityRefiner,
    OnlineColorModelRefiner,
    OracleRefiner,
    RefinerError,
    RefinerRequest,
    fit_online,
    refine,
    threshold,
)
from masktrack.synthesis import build_online_set, dilate
from masktrack.evaluation import iou

from support import art_mask


def gray(h=8, w=8, value=100):
    return Image(np.full((h, w, 3), value, dtype=np.uint8))


class TestThreshold:
    def test_strictly_above_tau_only(self):
        scores = ScoreMap(np.array([[0.49, 0.5], [0.5000001, 1.0]]))
        assert threshold(scores).data.tolist() == [[False, False], [True, True]]

    def test_custom_tau(self):
        scores = ScoreMap(np.array([[0.2, 0.3]]))
        assert threshold(scores, tau=0.25).data.tolist() == [[False, True]]


class TestRequest:
    def test_guidance_must_match_the_image(self):
        with pytest.raises(ValueError, match="does not match image"):
            RefinerRequest(image=gray(8, 8), guidance_mask=art_mask(["#"]))

    def test_guidance_is_optional(self):
        request = RefinerRequest(image=gray())
        assert request.guidance_mask is None


class TestIdentity:
    def test_echoes_the_guidance(self):
        guidance = art_mask(["#.", ".#"])
        scores = refine(IdentityRefiner(), RefinerRequest(image=gray(2, 2), guidance_mask=guidance))
        assert threshold(scores).matches(guidance)
        assert set(np.unique(scores.data)) <= {0.0, 1.0}

    def test_requires_guidance(self):
        with pytest.raises(RefinerError, match="guidance"):
            IdentityRefiner().refine(RefinerRequest(image=gray()))


class TestOracle:
    def _refiner(self):
        gt = (art_mask(["#.", ".."]), art_mask([".#", ".."]))
        return OracleRefiner(ground_truth=gt), gt

    def test_returns_the_frame_ground_truth(self):
        refiner, gt = self._refiner()
        scores = refiner.refine(RefinerRequest(image=gray(2, 2), frame_index=1))
        assert threshold(scores).matches(gt[1])

    def test_requires_a_frame_index(self):
        refiner, _ = self._refiner()
        with pytest.raises(RefinerError, match="frame index"):
            refiner.refine(RefinerRequest(image=gray(2, 2)))

    def test_frame_index_out_of_range(self):
        refiner, _ = self._refiner()
        with pytest.raises(RefinerError, match="frame 2"):
            refiner.refine(RefinerRequest(image=gray(2, 2), frame_index=2))

    def test_resolution_mismatch(self):
        refiner, _ = self._refiner()
        with pytest.raises(RefinerError, match="resolution"):
            refiner.refine(RefinerRequest(image=gray(4, 4), frame_index=0))


def two_color_scene(h=16, w=16):
    """Top half red foreground, bottom half green background."""
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[: h // 2] = (200, 40, 40)
    img[h // 2 :] = (40, 168, 40)
    gt = np.zeros((h, w), dtype=bool)
    gt[: h // 2] = True
    return Image(img), BinaryMask(gt)


class TestColorModel:
    def _fit(self):
        image, target = two_color_scene()
        sample = TrainingSample(image=image, input_mask=dilate(target, 3), target_mask=target)
        return fit_online([sample]), image, target

    def test_separable_colors_classify_perfectly(self):
        state, image, target = self._fit()
        scores = OnlineColorModelRefiner(state=state).refine(
            RefinerRequest(image=image, guidance_mask=None)
        )
        assert threshold(scores).matches(target)
        assert scores.data[:8].min() == pytest.approx(0.9411764705882353)
        assert scores.data[8:].max() == pytest.approx(0.0588235294117647)

    def test_histogram_is_position_aware(self):
        # Same color on both sides; only the position cells separate them.
        img = Image(np.full((16, 16, 3), 90, dtype=np.uint8))
        gt = np.zeros((16, 16), dtype=bool)
        gt[:, :8] = True
        sample = TrainingSample(image=img, input_mask=BinaryMask(gt), target_mask=BinaryMask(gt))
        state = fit_online([sample])
        scores = OnlineColorModelRefiner(state=state).refine(
            RefinerRequest(image=img, guidance_mask=None)
        )
        assert threshold(scores).matches(BinaryMask(gt))

    def test_guidance_attenuates_far_pixels(self):
        state, image, target = self._fit()
        refiner = OnlineColorModelRefiner(state=state)
        near = refiner.refine(RefinerRequest(image=image, guidance_mask=target))
        # Guidance in the wrong half pulls scores off the true object.
        wrong = BinaryMask(~target.data)
        far = refiner.refine(RefinerRequest(image=image, guidance_mask=wrong))
        assert far.data[0].max() < near.data[0].min()

    def test_empty_guidance_scores_zero(self):
        state, image, _ = self._fit()
        empty = BinaryMask(np.zeros((16, 16), dtype=bool))
        scores = OnlineColorModelRefiner(state=state).refine(
            RefinerRequest(image=image, guidance_mask=empty)
        )
        assert scores.data.max() == 0.0

    def test_fit_is_deterministic(self):
        a, _, _ = self._fit()
        b, _, _ = self._fit()
        assert np.array_equal(a.fg_hist, b.fg_hist)
        assert np.array_equal(a.bg_hist, b.bg_hist)
        assert a.fg_prior == b.fg_prior

    def test_fit_rejects_empty_stream(self):
        with pytest.raises(ValueError, match="empty sample stream"):
            fit_online([])

    def test_fit_rejects_all_empty_targets(self):
        image, _ = two_color_scene()
        empty = BinaryMask(np.zeros((16, 16), dtype=bool))
        sample = TrainingSample(image=image, input_mask=empty, target_mask=empty)
        with pytest.raises(ValueError, match="target mask is empty"):
            fit_online([sample])

    def test_self_refinement_recovers_the_annotation(self, dataset):
        # Fit on the standard augmentation set of one annotated frame, then
        # refine that same frame with its own mask as guidance.
        sequence = dataset.get("disc-slide")
        params = AugmentationParams(deformation=DeformationParams(rng_seed=0))
        samples = build_online_set(sequence.frames[0], sequence.ground_truth[0], params)
        refiner = OnlineColorModelRefiner(state=fit_online(samples))
        scores = refiner.refine(
            RefinerRequest(image=sequence.frames[0], guidance_mask=sequence.ground_truth[0])
        )
        assert iou(threshold(scores), sequence.ground_truth[0]) >= 0.9


class _StubClient:
    def __init__(self, result):
        self.result = result
        self.tuned = []

    def refine(self, image, guidance):
        return self.result

    def fine_tune(self, samples):
        self.tuned.extend(samples)
        return len(samples)


class TestExternal:
    def test_valid_scores_pass_through(self):
        scores = np.full((4, 4), 0.25, dtype=np.float32)
        refiner = ExternalRefiner(client=_StubClient(scores))
        out = refiner.refine(RefinerRequest(image=gray(4, 4)))
        assert out.data == pytest.approx(0.25)

    @pytest.mark.parametrize(
        "bad",
        [
            np.zeros((2, 4)),  # wrong shape
            np.full((4, 4), np.nan),  # non-finite
            np.full((4, 4), 1.5),  # out of range
        ],
    )
    def test_protocol_violations_are_rejected_not_clamped(self, bad):
        refiner = ExternalRefiner(client=_StubClient(bad))
        with pytest.raises(RefinerError):
            refiner.refine(RefinerRequest(image=gray(4, 4)))

    def test_fine_tune_passes_samples_through(self):
        client = _StubClient(np.zeros((16, 16)))
        refiner = ExternalRefiner(client=client)
        image, target = two_color_scene()
        sample = TrainingSample(image=image, input_mask=target, target_mask=target)
        assert refiner.fine_tune([sample]) == 1
        assert client.tuned == [sample]
