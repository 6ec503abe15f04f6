import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from regionguide.errors import ConfigError, DimensionError, PreconditionError, ResampleError
from regionguide.masks import (
    GroundingResult,
    ResamplePolicy,
    TagMaskPair,
    TokenLayout,
    build_token_pixel_mask,
    build_ungrounded_mask,
    filter_by_confidence,
    ground,
    layout_for_tags,
    load_tag_file,
    resample_mask,
    save_tag_file,
    tokenize,
    ungrounded_at,
    union_grounded,
)


def pair(tag, span, mask, conf=0.9):
    return TagMaskPair(tag, span, np.asarray(mask, dtype=bool), conf)


# -- tokenization and layout ---------------------------------------------------


def test_tokenize_marks_specials_and_punctuation_global():
    lay = tokenize("red car, tall tree.", max_length=10)
    texts = [t.text for t in lay.tokens]
    assert texts == ["<sos>", "red", "car", ",", "tall", "tree", ".", "<eos>", "<pad>", "<pad>"]
    assert lay.global_token_indices == {0, 3, 6, 7, 8, 9}
    assert lay.tokens[1].start == 0 and lay.tokens[2].end == 7


def test_tokenize_rejects_overlong_prompt():
    with pytest.raises(ConfigError):
        tokenize("a b c d", max_length=4)


def test_layout_for_tags_finds_spans():
    prompt, lay = layout_for_tags(["blue sky", "water"], max_length=8)
    assert prompt == "blue sky, water"
    assert lay.tag_spans == {"blue sky": (1, 2), "water": (4, 4)}
    assert lay.unassigned == ()


def test_layout_rejects_span_on_global_token():
    base = tokenize("sky, sea")
    with pytest.raises(ConfigError):
        base.with_spans({"sky": (1, 2)})


def test_layout_rejects_overlapping_spans():
    base = tokenize("big red sky")
    with pytest.raises(ConfigError):
        base.with_spans({"a": (1, 2), "b": (2, 3)})


def test_unassigned_tokens_listed():
    lay = tokenize("a quality photo of sky").with_spans({"sky": (5, 5)})
    assert lay.unassigned == (1, 2, 3, 4)


# -- pairs and filtering -------------------------------------------------------


def test_pair_invariants():
    with pytest.raises(PreconditionError):
        pair("x", (2, 1), [[1]])
    with pytest.raises(PreconditionError):
        pair("x", (0, 0), [[1]], conf=1.5)
    with pytest.raises(PreconditionError):
        TagMaskPair("x", (0, 0), np.array([[2]]), 0.5)


def test_threshold_zero_keeps_all():
    ps = [pair(str(i), (i, i), [[1]], c) for i, c in enumerate([0.0, 0.5, 1.0])]
    assert filter_by_confidence(ps, 0.0) == ps


def test_default_threshold_example():
    ps = [pair(str(i), (i, i), [[1]], c) for i, c in enumerate([0.9, 0.24, 0.25])]
    kept = filter_by_confidence(ps, 0.25)
    assert [p.tag for p in kept] == ["0", "2"]


def test_threshold_out_of_range():
    with pytest.raises(PreconditionError):
        filter_by_confidence([], 1.2)


@given(st.lists(st.floats(0, 1), max_size=12))
def test_filter_count_monotone_over_threshold_grid(confs):
    ps = sorted((pair(str(i), (i, i), [[1]], c) for i, c in enumerate(confs)), key=lambda p: p.confidence)
    counts = [len(filter_by_confidence(ps, t)) for t in (0.15, 0.25, 0.35, 0.45, 0.55)]
    assert counts == sorted(counts, reverse=True)


# -- union and complement --------------------------------------------------------


def test_empty_union_is_zero():
    assert not union_grounded([], (3, 2)).any()


def test_singleton_union():
    m = np.array([[1, 0], [0, 1]], dtype=bool)
    np.testing.assert_array_equal(union_grounded([pair("a", (1, 1), m)], (2, 2)), m)


def test_overlapping_union_matches_pixel_loop():
    rng = np.random.default_rng(5)
    a, b = rng.random((5, 7)) < 0.4, rng.random((5, 7)) < 0.4
    a[0, 0] = b[0, 0] = True
    got = union_grounded([pair("a", (1, 1), a), pair("b", (2, 2), b)], (5, 7))
    np.testing.assert_array_equal(got, oracles.union([a.tolist(), b.tolist()], 5, 7))


def test_union_resolution_mismatch():
    with pytest.raises(DimensionError):
        union_grounded([pair("a", (1, 1), np.ones((2, 2)))], (4, 4))


def test_complement_cases():
    np.testing.assert_array_equal(build_ungrounded_mask(np.zeros((2, 3), bool)).mask, np.ones((2, 3), bool))
    np.testing.assert_array_equal(build_ungrounded_mask(np.ones((2, 3), bool)).mask, np.zeros((2, 3), bool))
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(bool)
    np.testing.assert_array_equal(build_ungrounded_mask(checker).mask, ~checker)


@given(hnp.arrays(np.bool_, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_complement_partitions(u):
    m = build_ungrounded_mask(u).mask
    assert np.all(m | u) and not np.any(m & u)


# -- resampling ------------------------------------------------------------------


@pytest.mark.parametrize("policy", list(ResamplePolicy))
def test_identity_resample(policy):
    m = np.random.default_rng(0).random((6, 4)) < 0.5
    np.testing.assert_array_equal(resample_mask(m, (6, 4), policy), m)


def test_any_coverage_keeps_single_pixel():
    m = np.zeros((4, 4), bool)
    m[3, 0] = True
    out = resample_mask(m, (2, 2), "any_coverage")
    np.testing.assert_array_equal(out, [[0, 0], [1, 0]])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("policy", ["any_coverage", "majority", "nearest"])
def test_block_resample_matches_enumeration(seed, policy):
    m = np.random.default_rng(seed).random((8, 8)) < 0.5
    np.testing.assert_array_equal(resample_mask(m, (4, 4), policy), oracles.resample_block(m.tolist(), 4, 4, policy))


def test_majority_tie_rounds_up():
    m = np.array([[1, 0], [0, 1]], bool)
    assert resample_mask(m, (1, 1), "majority")[0, 0]


def test_nearest_handles_non_divisible_and_upsampling():
    m = np.random.default_rng(2).random((5, 7)) < 0.5
    for target in [(3, 2), (10, 14), (1, 1)]:
        np.testing.assert_array_equal(resample_mask(m, target, "nearest"),
                                      oracles.resample_block(m.tolist(), *target, "nearest"))


def test_block_resample_divisibility_error():
    with pytest.raises(ResampleError):
        resample_mask(np.ones((5, 5), bool), (2, 2), "any_coverage")
    with pytest.raises(ResampleError):
        resample_mask(np.ones((4, 4), bool), (0, 2), "nearest")


# -- token-pixel masks -----------------------------------------------------------


def six_token_layout():
    _, lay = layout_for_tags(["sky", "sea"], max_length=6)
    return lay  # <sos> sky , sea <eos> <pad>


def test_no_pairs_leaves_only_global_tokens():
    lay = six_token_layout()
    tpm = build_token_pixel_mask([], lay, (2, 2))
    expected = np.zeros((4, 6), bool)
    expected[:, sorted(lay.global_token_indices)] = True
    np.testing.assert_array_equal(tpm.mask, expected)


def test_full_coverage_tag_column_all_ones():
    lay = six_token_layout()
    tpm = build_token_pixel_mask([pair("sky", (1, 1), np.ones((2, 2)))], lay, (2, 2))
    assert tpm.mask[:, 1].all() and not tpm.mask[:, 3].any()


def test_two_disjoint_tags_match_double_loop():
    lay = six_token_layout()
    sky = [[1, 1], [0, 0]]
    sea = [[0, 0], [0, 1]]
    ps = [pair("sky", (1, 1), sky), pair("sea", (3, 3), sea)]
    tpm = build_token_pixel_mask(ps, lay, (2, 2))
    expected = oracles.token_pixel_matrix(2, 2, 6, lay.global_token_indices, [((1, 1), sky), ((3, 3), sea)])
    np.testing.assert_array_equal(tpm.mask, expected)
    assert tpm.resolution == (2, 2)


def test_overlapping_tags_both_visible():
    lay = six_token_layout()
    ps = [pair("sky", (1, 1), np.ones((2, 2))), pair("sea", (3, 3), [[1, 0], [0, 0]])]
    tpm = build_token_pixel_mask(ps, lay, (2, 2))
    assert tpm.mask[0, 1] and tpm.mask[0, 3]


def test_token_pixel_mask_resamples_tag_masks():
    lay = six_token_layout()
    m = np.zeros((4, 4), bool)
    m[0, 3] = True
    tpm = build_token_pixel_mask([pair("sky", (1, 1), m)], lay, (2, 2), "any_coverage")
    np.testing.assert_array_equal(tpm.mask[:, 1], [0, 1, 0, 0])


def test_dropped_tag_masked_everywhere():
    lay = six_token_layout()
    kept = filter_by_confidence([pair("sky", (1, 1), np.ones((2, 2)), 0.1)], 0.25)
    tpm = build_token_pixel_mask(kept, lay, (2, 2))
    assert not tpm.mask[:, 1].any()


def test_inconsistent_pair_is_config_error():
    lay = six_token_layout()
    with pytest.raises(ConfigError):
        build_token_pixel_mask([pair("sky", (3, 3), np.ones((2, 2)))], lay, (2, 2))
    with pytest.raises(ConfigError):
        build_token_pixel_mask([pair("x", (2, 2), np.ones((2, 2)))], lay, (2, 2))
    with pytest.raises(ConfigError):
        build_token_pixel_mask([pair("x", (9, 9), np.ones((2, 2)))], lay, (2, 2))


@given(st.lists(hnp.arrays(np.bool_, (8, 8)), max_size=3), st.sampled_from(list(ResamplePolicy)))
def test_every_row_keeps_a_token(masks, policy):
    _, lay = layout_for_tags(["a", "b", "c"], max_length=9)
    ps = [pair(t, lay.tag_spans[t], m) for t, m in zip("abc", masks)]
    for res in [(8, 8), (4, 4), (2, 2)]:
        tpm = build_token_pixel_mask(ps, lay, res, policy)
        assert tpm.mask.any(axis=1).all()


def test_ground_is_deterministic_and_complement_exact():
    rng = np.random.default_rng(9)
    _, lay = layout_for_tags(["a", "b"], max_length=8)
    ps = [pair(t, lay.tag_spans[t], rng.random((8, 8)) < 0.3, c) for t, c in [("a", 0.5), ("b", 0.2)]]
    g1 = ground(ps, lay, [(8, 8), (4, 4), (2, 2)], 0.25)
    g2 = ground(ps, lay, [(8, 8), (4, 4), (2, 2)], 0.25)
    assert isinstance(g1, GroundingResult)
    assert [p.tag for p in g1.retained] == ["a"]
    for res in [(8, 8), (4, 4), (2, 2)]:
        np.testing.assert_array_equal(g1.token_pixel_masks[res].mask, g2.token_pixel_masks[res].mask)
        union = union_grounded([p.resampled(res) for p in g1.retained], res)
        np.testing.assert_array_equal(g1.ungrounded[res].mask, ~union)
        np.testing.assert_array_equal(g1.ungrounded[res].mask, ungrounded_at(g1.retained, res).mask)


# -- tag file ----------------------------------------------------------------------


def test_tag_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    prompt, lay = layout_for_tags(["old boat", "river"], max_length=10)
    ps = [pair(t, lay.tag_spans[t], rng.random((8, 8)) < 0.5, c) for t, c in [("old boat", 0.7), ("river", 0.31)]]
    path = save_tag_file(tmp_path / "tags.json", prompt, ps, max_length=10)
    tf = load_tag_file(path)
    assert tf.prompt == prompt and tf.max_length == 10
    for a, b in zip(ps, tf.pairs):
        assert (a.tag, a.token_span, a.confidence) == (b.tag, b.token_span, b.confidence)
        np.testing.assert_array_equal(a.mask, b.mask)
    assert tf.layout().tag_spans == lay.tag_spans
    assert tf.layout().global_token_indices == lay.global_token_indices


def test_tag_file_nonzero_pixels_are_foreground(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[0, 1], [128, 255]], np.uint8), mode="L").save(tmp_path / "m.png")
    (tmp_path / "t.json").write_text('{"prompt": "sky", "tags": [{"tag": "sky", "token_span": [1, 1],'
                                     ' "confidence": 0.5, "mask_path": "m.png"}]}')
    tf = load_tag_file(tmp_path / "t.json")
    np.testing.assert_array_equal(tf.pairs[0].mask, [[0, 1], [1, 1]])


@pytest.mark.parametrize("doc", [
    "not json",
    '{"tags": []}',
    '{"prompt": "x", "tags": [{"tag": "x"}]}',
    '{"prompt": "x", "tags": [{"tag": "x", "token_span": 1, "confidence": 0.5, "mask_path": "m.png"}]}',
])
def test_bad_tag_file_is_config_error(tmp_path, doc):
    from PIL import Image

    Image.fromarray(np.ones((2, 2), np.uint8)).save(tmp_path / "m.png")
    (tmp_path / "t.json").write_text(doc)
    with pytest.raises(ConfigError):
        load_tag_file(tmp_path / "t.json")


def test_layout_type_exported():
    assert isinstance(six_token_layout(), TokenLayout)
