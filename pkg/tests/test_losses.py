import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundingdesk.autodiff import Tensor
from groundingdesk.autodiff.gradcheck import check_gradients
from groundingdesk.boxes import cxcywh_to_xyxy, giou, giou_matrix, iou_matrix, xyxy_to_cxcywh
from groundingdesk.errors import NumericError, ShapeError
from groundingdesk.losses import (
    GroundTruth,
    LossWeights,
    focal_contrastive_loss,
    giou_loss_terms,
    match_cost,
    set_loss,
    sigmoid_focal_loss,
    total_loss,
)
from groundingdesk.matching import MatchResult, hungarian_match
from groundingdesk.model import GroundingDetector, ModelConfig
from groundingdesk.model.detector import SetPrediction, bias_init
from groundingdesk.text import Vocabulary, tokenize


def brute_force(cost):
    """All optimal assignments by exhaustive enumeration, with exact rational sums."""
    nq, ng = cost.shape
    exact = [[Fraction(float(c)) for c in row] for row in cost]
    best, winners = None, []
    if nq >= ng:
        candidates = ([(q, g) for g, q in enumerate(perm)] for perm in itertools.permutations(range(nq), ng))
    else:
        candidates = ([(q, g) for q, g in enumerate(perm)] for perm in itertools.permutations(range(ng), nq))
    for pairs in candidates:
        total = sum(exact[q][g] for q, g in pairs)
        if best is None or total < best:
            best, winners = total, [sorted(pairs)]
        elif total == best:
            winners.append(sorted(pairs))
    return best, winners


# -- GIoU -------------------------------------------------------------------------------------

def test_giou_cases():
    box = [0.5, 0.5, 1.0, 1.0]
    assert giou(box, box) == 1.0
    assert giou_matrix([[0, 0, 1, 1]], [[1, 0, 2, 1]])[0, 0] == 0.0
    assert math.isclose(giou_matrix([[0, 0, 1, 1]], [[2, 0, 3, 1]])[0, 0], -1 / 3, rel_tol=1e-15)


def test_iou_cases():
    assert iou_matrix([[0, 0, 2, 2]], [[0, 0, 2, 2]])[0, 0] == 1.0
    assert math.isclose(iou_matrix([[0, 0, 2, 2]], [[1, 1, 3, 3]])[0, 0], 1 / 7, rel_tol=1e-15)
    assert iou_matrix([[0, 0, 1, 1]], [[5, 5, 6, 6]])[0, 0] == 0.0


def random_boxes(rng, n):
    xy = rng.uniform(0, 10, (n, 2))
    wh = rng.uniform(0.1, 5, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_giou_properties_random():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 400), random_boxes(rng, 400)
    g, i = giou_matrix(a, b), iou_matrix(a, b)
    assert np.all(g <= i)
    assert np.all(g >= -1) and np.all(g <= 1)
    assert np.allclose(g, giou_matrix(b, a).T, atol=1e-15)


def test_giou_equals_iou_when_enclosure_is_union():
    inner = [[1, 1, 2, 2]]
    outer = [[0, 0, 3, 3]]
    assert giou_matrix(inner, outer)[0, 0] == iou_matrix(inner, outer)[0, 0]


def test_giou_degenerate_box():
    assert giou_matrix([[0, 0, 0, 1]], [[1, 0, 2, 1]])[0, 0] == pytest.approx(-0.5)


def test_giou_loss_terms_match_matrix_and_gradcheck():
    rng = np.random.default_rng(1)
    pred = Tensor(xyxy_to_cxcywh(random_boxes(rng, 6)) / 15, requires_grad=True)
    gt = xyxy_to_cxcywh(random_boxes(rng, 6)) / 15
    ref = 1.0 - np.diag(giou_matrix(cxcywh_to_xyxy(pred.data), cxcywh_to_xyxy(gt)))
    assert np.allclose(giou_loss_terms(pred, gt).data, ref, atol=1e-14)
    w = rng.normal(size=6)
    assert check_gradients(lambda: (giou_loss_terms(pred, gt) * w).sum(), [pred]) <= 1e-6


# -- focal loss -------------------------------------------------------------------------------

def test_focal_positive_half_probability():
    out = sigmoid_focal_loss(Tensor([0.0]), np.array([1.0])).data[0]
    assert math.isclose(out, 0.25 * 0.25 * -math.log(0.5), rel_tol=1e-14)
    assert round(out, 6) == 0.043322


def test_focal_perfect_logits_vanish():
    out = sigmoid_focal_loss(Tensor([60.0, -60.0]), np.array([1.0, 0.0])).data
    assert np.all(out < 1e-50)


def test_focal_all_negative_at_prior():
    b = bias_init(0.01)
    p = 1 / (1 + math.exp(-b))
    out = sigmoid_focal_loss(Tensor(np.full((2, 3), b)), np.zeros((2, 3))).data
    assert np.allclose(out, 0.75 * p**2 * -math.log(1 - p), rtol=1e-13, atol=0)


def test_focal_gradient():
    x = Tensor(np.random.default_rng(2).normal(0, 3, (4, 5)), requires_grad=True)
    t = (np.random.default_rng(3).random((4, 5)) < 0.3).astype(float)
    assert check_gradients(lambda: sigmoid_focal_loss(x, t).sum(), [x]) <= 1e-6


def test_focal_contrastive_normalizes_by_matches():
    logits = Tensor(np.zeros((3, 2)))
    pm = np.array([[1.0, 0.0]])
    match = MatchResult([(1, 0)], 0.0)
    targets = np.zeros((3, 2))
    targets[1] = pm[0]
    expect = sigmoid_focal_loss(logits, targets).data.sum()
    assert math.isclose(focal_contrastive_loss(logits, pm, match, 0.25, 2.0).data, expect, rel_tol=1e-14)


# -- Hungarian matching ---------------------------------------------------------------------------

def test_hungarian_two_by_two():
    res = hungarian_match([[1, 2], [3, 1]])
    assert res.pairs == [(0, 0), (1, 1)] and res.cost == 2


def test_hungarian_single():
    assert hungarian_match([[7.5]]).pairs == [(0, 0)]


def test_hungarian_nan_is_numeric_error():
    with pytest.raises(NumericError):
        hungarian_match([[1.0, float("nan")]])


def test_hungarian_empty():
    assert hungarian_match(np.zeros((3, 0))).pairs == []


@pytest.mark.parametrize("seed", range(10))
def test_hungarian_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(30):
        nq, ng = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        cost = rng.normal(size=(nq, ng))
        res = hungarian_match(cost)
        best, winners = brute_force(cost)
        assert sum(Fraction(float(cost[q, g])) for q, g in res.pairs) == best
        assert len(res.pairs) == min(nq, ng)
        assert res.pairs in winners


@pytest.mark.parametrize("seed", range(10))
def test_hungarian_tie_break_is_lexicographic(seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(30):
        nq, ng = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        cost = rng.integers(0, 3, size=(nq, ng)).astype(float)
        _, winners = brute_force(cost)
        assert hungarian_match(cost).pairs == min(winners)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_hungarian_scale_invariant(seed, scale):
    cost = np.random.default_rng(seed).random((5, 3))
    assert hungarian_match(cost).pairs == hungarian_match(cost * scale).pairs


# -- match cost and total loss ------------------------------------------------------------------

def small_case(seed=0, nq=5, ng=2, nt=4):
    rng = np.random.default_rng(seed)
    boxes = Tensor(rng.uniform(0.2, 0.6, (nq, 4)), requires_grad=True)
    logits = Tensor(rng.normal(size=(nq, nt)), requires_grad=True)
    pm = np.zeros((ng, nt))
    for i in range(ng):
        pm[i, i % nt] = 1.0
    gt = GroundTruth(rng.uniform(0.2, 0.6, (ng, 4)), pm)
    return SetPrediction(boxes, logits), gt


def test_match_cost_identical_box_has_no_box_terms():
    pred, gt = small_case()
    pred.boxes.data[0] = gt.boxes[0]
    only_boxes = match_cost(pred, gt, LossWeights(cls=0.0, l1=1.0, giou=1.0))
    assert only_boxes[0, 0] == 0.0


def test_match_cost_pure_l1():
    pred, gt = small_case(1)
    cost = match_cost(pred, gt, LossWeights(cls=0.0, l1=1.0, giou=0.0))
    direct = np.abs(pred.boxes.data[:, None] - gt.boxes[None]).sum(-1)
    assert np.array_equal(cost, direct)


def test_match_cost_monotone_in_l1_distance():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(300):
        pred, gt = small_case(int(rng.integers(1 << 30)))
        w = LossWeights()
        before = match_cost(pred, gt, w)
        q = int(rng.integers(pred.boxes.shape[0]))
        # push the query's centre away from every target along x
        direction = np.sign(pred.boxes.data[q, 0] - gt.boxes[:, 0].mean()) or 1.0
        if np.all(np.sign(pred.boxes.data[q, 0] - gt.boxes[:, 0]) == direction):
            pred.boxes.data[q, 0] += direction * 0.1
            after = match_cost(pred, gt, w)
            assert np.all(after[q] >= before[q] - 1e-12)
            checked += 1
    assert checked >= 50


def test_set_loss_empty_ground_truth():
    pred, _ = small_case()
    gt = GroundTruth(np.zeros((0, 4)), np.zeros((0, 4)))
    cls, l1, g, match = set_loss(pred, gt, LossWeights())
    assert len(match) == 0 and float(l1.data) == 0.0 and float(g.data) == 0.0
    assert math.isclose(float(cls.data), sigmoid_focal_loss(pred.logits, np.zeros((5, 4))).data.sum(), rel_tol=1e-14)


def test_loss_components_non_negative_and_zero_for_perfect_boxes():
    pred, gt = small_case(5)
    cls, l1, g, match = set_loss(pred, gt, LossWeights())
    assert min(float(cls.data), float(l1.data), float(g.data)) >= 0
    for q, j in match.pairs:
        pred.boxes.data[q] = gt.boxes[j]
    _, l1, g, _ = set_loss(pred, gt, LossWeights(), match)
    assert abs(float(l1.data)) == 0.0 and abs(float(g.data)) < 1e-15


def test_set_loss_gradients():
    pred, gt = small_case(6)
    match = set_loss(pred, gt, LossWeights())[3]

    def f():
        cls, l1, g, _ = set_loss(pred, gt, LossWeights(), match)
        return cls * 2.0 + l1 * 5.0 + g * 2.0

    assert check_gradients(f, [pred.boxes, pred.logits]) <= 1e-5


def test_gt_normalization_flag():
    pred, gt = small_case(7, nq=1, ng=2)
    a = set_loss(pred, gt, LossWeights(normalization="matched"))
    b = set_loss(pred, gt, LossWeights(normalization="gt"))
    assert math.isclose(float(a[1].data), 2 * float(b[1].data), rel_tol=1e-14)


@pytest.fixture(scope="module")
def desk():
    vocab = Vocabulary.build(["red box. blue ball."])
    cap = tokenize("red box. blue ball.", vocab)
    px = np.random.default_rng(1).random((3, 32, 32))
    gt = GroundTruth(np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]]), np.zeros((2, 6)))
    gt.positive_map[0, :2] = 1
    gt.positive_map[1, 3:5] = 1
    return GroundingDetector(ModelConfig(num_query=8, vocab_size=16)), px, cap, gt


def test_total_loss_sets_and_sum(desk):
    model, px, cap, gt = desk
    lb = total_loss(model(px, cap), gt)
    assert len(lb.per_layer) == model.config.n_decoder_layers + 1 == len(lb.matches)
    w = LossWeights()
    expect = math.fsum(w.cls * r["cls"] + w.l1 * r["l1"] + w.giou * r["giou"] for r in lb.per_layer)
    assert math.isclose(float(lb.total.data), expect, rel_tol=1e-12)
    assert set(lb.row()) == {"total", "cls", "l1", "giou"}


def test_total_loss_empty_ground_truth(desk):
    model, px, cap, _ = desk
    lb = total_loss(model(px, cap), GroundTruth(np.zeros((0, 4)), np.zeros((0, 6))))
    assert lb.l1 == 0.0 and lb.giou == 0.0 and lb.cls > 0


def test_total_loss_with_fixed_matches_is_stable(desk):
    model, px, cap, gt = desk
    pred = model(px, cap)
    lb = total_loss(pred, gt)
    again = total_loss(pred, gt, matches=lb.matches)
    assert float(again.total.data) == float(lb.total.data)
    with pytest.raises(ShapeError):
        total_loss(pred, gt, matches=lb.matches[:1])
