"""Tokenizer, vocabulary, and stream assembly invariants."""

import numpy as np
import pytest

from trajtok.geometry import Sample, Trajectory, Waypoint
from trajtok.simulator import GRID_SIZE, OccGrid
from trajtok.tokens import (
    BASE_TOKENS,
    BOS,
    CONTEXT_LIMIT,
    EOS,
    IMG,
    N_VISUAL,
    PAD,
    PT,
    PTE,
    PTS,
    SPECIALS,
    UNK,
    VOCAB_CAP,
    Vocabulary,
    assemble,
    build_vocab,
    build_vocab_from_samples,
    render_prompt,
    tokenize,
)

ZERO_GRID = OccGrid(cells=np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.uint8))


def make_sample(T=5, goal=(12.0, -3.5), cot=None):
    hist = Trajectory(tuple(Waypoint(float(i - 8), 0.0) for i in range(9)))
    fut = Trajectory(tuple(Waypoint(float(k + 1), 0.5 * k) for k in range(T)))
    return Sample(
        history=hist,
        observations=(ZERO_GRID,) * 9,
        goal=Waypoint(*goal),
        future=fut,
        scene_id="s",
        sample_id="s:t8",
        cot_text=cot,
    )


class TestTokenize:
    def test_words_and_case(self):
        assert tokenize("Hello World") == ["hello", "world"]

    def test_digits_split_individually(self):
        assert tokenize("2048") == ["2", "0", "4", "8"]

    def test_mixed_text(self):
        assert tokenize("Goal 12.5m!") == ["goal", "1", "2", ".", "5", "m", "!"]

    def test_alpha_runs_break_on_digits(self):
        assert tokenize("ab3cd") == ["ab", "3", "cd"]

    def test_punctuation_single(self):
        assert tokenize("don't stop, now.") == ["don", "'", "t", "stop", ",", "now", "."]

    def test_whitespace_collapse_and_empty(self):
        assert tokenize("  a \n\t b  ") == ["a", "b"]
        assert tokenize("") == []

    def test_negative_decimal(self):
        assert tokenize("-27.43") == ["-", "2", "7", ".", "4", "3"]


class TestVocabulary:
    def test_special_ids_are_pinned(self):
        assert SPECIALS == (
            "<pad>", "<unk>", "<s>", "</s>", "<image>", "<point>", "<point_start>", "<point_end>"
        )
        assert (PAD, UNK, BOS, EOS, IMG, PT, PTS, PTE) == (0, 1, 2, 3, 4, 5, 6, 7)
        v = build_vocab(["hello"])
        for i, tok in enumerate(SPECIALS):
            assert v.id_of(tok) == i

    def test_base_tokens_have_stable_ids(self):
        v = build_vocab(["completely unrelated words"])
        for k, tok in enumerate(BASE_TOKENS):
            assert v.id_of(tok) == 8 + k
        assert v.id_of("7") == 8 + 7

    def test_frequency_order_with_alphabetical_ties(self):
        v = build_vocab(["b b b zebra apple apple zebra"])
        first = len(SPECIALS) + len(BASE_TOKENS)
        assert v.tokens[first : first + 3] == ("b", "apple", "zebra")

    def test_deterministic_under_corpus_order(self):
        texts = ["alpha beta", "beta gamma gamma", "delta alpha beta"]
        assert build_vocab(texts) == build_vocab(list(reversed(texts)))

    def test_cap_is_enforced(self):
        words = [
            chr(97 + i // 676) + chr(97 + i // 26 % 26) + chr(97 + i % 26)
            for i in range(VOCAB_CAP)
        ]
        v = build_vocab([" ".join(words)])
        assert v.size == VOCAB_CAP
        assert v.id_of(words[-1]) == UNK  # dropped past the cap

    def test_unknown_maps_to_unk(self):
        v = build_vocab(["known words only"])
        assert v.encode("known mystery")[1] == UNK

    def test_encode_decode_round_trip(self):
        v = build_vocab(["turn left for 3 steps , then proceed straight"])
        text = "turn left for 3 steps"
        assert v.decode(v.encode(text)) == text

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(["some corpus with several words in it"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        w = Vocabulary.load(path)
        assert w == v
        assert path.read_text().count("\n") == v.size

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(SPECIALS + ("a", "a"))

    def test_must_start_with_specials(self):
        with pytest.raises(ValueError):
            Vocabulary(("a",) + SPECIALS)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab_from_samples([make_sample(T=5), make_sample(T=12)])


class TestAssemble:
    def test_layout_structure(self, vocab):
        s = make_sample(T=5)
        st = assemble(s, vocab, mode="forecast")
        prompt_len = len(vocab.encode(render_prompt(s.goal, 5, "forecast")))
        assert st.ids[0] == BOS
        assert np.all(st.ids[1 : 1 + N_VISUAL] == IMG)
        assert np.array_equal(st.visual_positions, np.arange(1, 145))
        p = 1 + N_VISUAL + prompt_len
        assert st.ids[p] == PTS
        assert np.all(st.ids[p + 1 : p + 10] == PT)
        assert st.ids[p + 10] == PTE
        assert st.ids[p + 11] == PT  # goal slot
        assert st.ids[p + 12] == PTS
        assert np.all(st.ids[p + 13 : p + 18] == PT)
        assert st.ids[p + 18] == PTE
        assert st.ids[p + 19] == EOS
        assert len(st) == p + 20

    def test_length_matches_enumeration(self, vocab):
        # 1 bos + 144 visual + prompt + pts + 9 pt + pte + goal pt + (T + 3)
        for T in (1, 5, 10, 20):
            s = make_sample(T=T)
            P = len(vocab.encode(render_prompt(s.goal, T, "forecast")))
            st = assemble(s, vocab, "forecast")
            assert len(st) == 160 + P + T

    def test_loss_mask_covers_exactly_targets(self, vocab):
        s = make_sample(T=7)
        st = assemble(s, vocab, "forecast")
        assert int(st.loss_mask.sum()) == 7 + 3
        assert st.loss_mask[st.prefix_length :].all()
        assert not st.loss_mask[: st.prefix_length].any()

    def test_point_alignment(self, vocab):
        s = make_sample(T=4)
        st = assemble(s, vocab, "forecast")
        assert len(st.point_positions) == 9 + 1 + 4
        assert np.all(st.ids[st.point_positions] == PT)
        expected = (
            [[p.x, p.y] for p in s.history.points]
            + [[s.goal.x, s.goal.y]]
            + [[p.x, p.y] for p in s.future.points]
        )
        assert np.allclose(st.point_values, expected)
        assert list(st.point_supervised) == [False] * 10 + [True] * 4

    def test_every_pt_token_is_listed(self, vocab):
        st = assemble(make_sample(T=6), vocab, "forecast")
        assert sorted(np.flatnonzero(st.ids == PT)) == sorted(st.point_positions)

    def test_cot_targets_are_text(self, vocab):
        cot = "observation : no obstacles detected . plan : proceed straight for 5 steps ."
        s = make_sample(T=5, cot=cot)
        v = build_vocab_from_samples([s])
        st = assemble(s, v, mode="cot")
        target_ids = st.ids[st.loss_mask]
        assert list(target_ids) == v.encode(cot) + [EOS]
        assert PT not in target_ids[:-1]
        assert list(st.point_supervised) == [False] * 10

    def test_cot_without_text_rejected(self, vocab):
        with pytest.raises(ValueError):
            assemble(make_sample(T=3), vocab, mode="cot")

    def test_prefix_only_assembly(self, vocab):
        st = assemble(make_sample(T=5), vocab, "forecast", include_targets=False)
        assert not st.loss_mask.any()
        assert st.ids[-1] == PT  # ends at the goal slot
        assert len(st.point_positions) == 10

    def test_requested_horizon_changes_prompt_only(self, vocab):
        s = make_sample(T=5)
        a = assemble(s, vocab, "forecast", requested_horizon=5)
        b = assemble(s, vocab, "forecast", requested_horizon=9)
        assert a.requested_horizon == 5 and b.requested_horizon == 9
        # same number of supervised points either way
        assert a.point_supervised.sum() == b.point_supervised.sum() == 5
        assert vocab.id_of("9") in b.ids[: b.prefix_length]

    def test_grids_travel_with_stream(self, vocab):
        st = assemble(make_sample(T=3), vocab)
        assert st.grids.shape == (9, GRID_SIZE, GRID_SIZE)
        assert st.grids.dtype == np.uint8

    def test_context_overflow_raises(self, vocab):
        s = make_sample(T=3, cot=" ".join(["word"] * 400))
        with pytest.raises(ValueError, match="context"):
            assemble(s, vocab, mode="cot")

    def test_deterministic(self, vocab):
        a = assemble(make_sample(T=8), vocab)
        b = assemble(make_sample(T=8), vocab)
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.point_values, b.point_values)
