import numpy as np
import pytest

from jointdiff.errors import ContractError, FormatError
from jointdiff.model import (
    ModelConfig,
    SuffixScorer,
    TransformerModel,
    build_mask,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
)
from jointdiff.nncore import Adam
from jointdiff.tokenspace import SequenceLayout


# hand-enumerated 8x8 admissibility for a toy layout of 2 text, 2 current,
# 2 future, 2 action positions, from the layering rules: text causal;
# current sees text + itself (bidir); future sees prompt + itself (bidir);
# actions see everything before them + themselves (bidir).
def toy_seq_hand_matrix():
    return np.array(
        [
            [1, 0, 0, 0, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1, 1],
        ],
        dtype=bool,
    )


class TestBuildMask:
    def test_hybrid_matches_hand_enumerated_fixture(self):
        # blocks of two: text [0,2), cur [2,4), fut [4,6), act [6,8)
        seq = _blocks_of_two()
        assert (seq.cur_block, seq.fut_block, seq.act_block) == ((2, 4), (4, 6), (6, 8))
        mask = build_mask("hybrid", seq, context_len=8)
        assert np.array_equal(mask.admissible, toy_seq_hand_matrix())

    def test_causal_is_lower_triangular(self, seq):
        mask = build_mask("causal", seq)
        n = seq.context_len
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        assert np.array_equal(mask.admissible, j <= i)

    def test_hybrid_no_backward_flow(self, seq, hybrid_mask):
        adm = hybrid_mask.admissible
        f0, f1 = seq.fut_block
        a0, a1 = seq.act_block
        # future-image rows never admit action keys
        assert not adm[f0:f1, a0:a1].any()
        # prompt rows never admit future or action keys
        assert not adm[: seq.prompt_len, f0:a1].any()
        # action rows admit prompt and future-image keys
        assert adm[a0:a1, : seq.prompt_len].all()
        assert adm[a0:a1, f0:f1].all()

    def test_bidirectional_makes_diffused_blocks_mutually_visible(self, seq):
        adm = build_mask("bidirectional", seq).admissible
        f0, f1 = seq.fut_block
        a0, a1 = seq.act_block
        assert adm[f0:f1, a0:a1].all()
        assert adm[a0:a1, f0:f1].all()
        assert not adm[: seq.prompt_len, f0:a1].any()

    def test_every_position_attends_to_itself(self, seq):
        for scheme in ("hybrid", "causal", "bidirectional"):
            adm = build_mask(scheme, seq).admissible
            assert adm.diagonal().all()

    def test_row_counts_match_closed_forms(self, seq, hybrid_mask):
        adm = hybrid_mask.admissible
        counts = adm.sum(axis=1)
        t = seq.text_len
        cur_len = seq.cur_block[1] - seq.cur_block[0]
        fut_len = seq.fut_block[1] - seq.fut_block[0]
        act_len = seq.act_block[1] - seq.act_block[0]
        for p in range(seq.context_len):
            if p < t:
                expect = p + 1
            elif p < seq.cur_block[1]:
                expect = t + cur_len
            elif p < seq.fut_block[1]:
                expect = seq.prompt_len + fut_len
            elif p < seq.act_block[1]:
                expect = seq.prompt_len + fut_len + act_len
            else:
                expect = 1
            assert counts[p] == expect, f"row {p}"


def _blocks_of_two():
    """A sequence layout whose four blocks are exactly two positions each:
    with image_len=0 the image blocks are their BOI/EOI pairs, and
    max_actions=0 leaves BOA plus a single slot in the action block."""
    return SequenceLayout(text_len=2, image_len=0, max_actions=0)


class TestForward:
    def test_cached_suffix_logits_match_uncached(self, tiny_model, seq, layout, hybrid_mask):
        rng = np.random.default_rng(0)
        from jointdiff.decode import decode_template
        from jointdiff.toyworld import generate_records

        recs = generate_records_cached()
        for i, rec in enumerate(recs[:10]):
            template = decode_template(rec.text, rec.cur, seq, layout)
            cached = SuffixScorer(tiny_model, hybrid_mask, template[: seq.prompt_len], use_cache=True)
            plain = SuffixScorer(tiny_model, hybrid_mask, template[: seq.prompt_len], use_cache=False)
            a = cached.suffix_logits(template)
            b = plain.suffix_logits(template)
            assert np.max(np.abs(a - b)) <= 1e-5

    def test_train_and_infer_paths_agree(self, tiny_model, seq, layout, hybrid_mask):
        from jointdiff.decode import decode_template

        rec = generate_records_cached()[0]
        template = decode_template(rec.text, rec.cur, seq, layout)
        logits_train = tiny_model.forward_train(template[None, :], hybrid_mask)[0]
        sess = tiny_model.session(hybrid_mask)
        logits_infer = sess.extend(template)
        assert np.max(np.abs(logits_train - logits_infer)) <= 1e-5

    def test_prompt_mismatch_raises(self, tiny_model, seq, layout, hybrid_mask):
        from jointdiff.decode import decode_template

        rec = generate_records_cached()[0]
        template = decode_template(rec.text, rec.cur, seq, layout)
        scorer = SuffixScorer(tiny_model, hybrid_mask, template[: seq.prompt_len], use_cache=True)
        other = template.copy()
        other[0] = (other[0] + 1) % 6
        with pytest.raises(ContractError):
            scorer.suffix_logits(other)

    def test_action_perturbation_never_changes_image_logits(self, tiny_model, seq, layout, hybrid_mask):
        """Mask soundness, exhaustive over the action segment."""
        from jointdiff.decode import decode_template

        rec = generate_records_cached()[0]
        template = decode_template(rec.text, rec.cur, seq, layout)
        sess = tiny_model.session(hybrid_mask)
        base = sess.extend(template)
        f0, f1 = seq.fut_tokens
        a_lo, a_hi = seq.act_tokens
        act_ids = layout.action_ids_with_eoa()
        for p in range(a_lo, a_hi):
            mutated = template.copy()
            mutated[p] = act_ids[p % len(act_ids)]
            sess2 = tiny_model.session(hybrid_mask)
            out = sess2.extend(mutated)
            # rows producing image predictions: f0-1 .. f1-2
            assert np.array_equal(base[f0 - 1 : f1 - 1], out[f0 - 1 : f1 - 1]), f"position {p}"

    def test_diffused_perturbation_never_changes_prompt_rows(self, tiny_model, seq, layout, hybrid_mask):
        from jointdiff.decode import decode_template

        rec = generate_records_cached()[0]
        template = decode_template(rec.text, rec.cur, seq, layout)
        sess = tiny_model.session(hybrid_mask)
        base = sess.extend(template)
        vis = layout.visual_ids()
        act = layout.action_ids_with_eoa()
        P = seq.prompt_len
        for p in seq.diffused_positions():
            mutated = template.copy()
            pool = vis if seq.fut_tokens[0] <= p < seq.fut_tokens[1] else act
            mutated[p] = pool[p % len(pool)]
            sess2 = tiny_model.session(hybrid_mask)
            out = sess2.extend(mutated)
            assert np.array_equal(base[: P - 1], out[: P - 1]), f"position {p}"

    def test_shift_alignment_masked_input_still_predicted(self, tiny_model, seq, layout, hybrid_mask):
        """Masking position p's input changes nothing about the existence of
        its prediction: the logits come from row p-1."""
        from jointdiff.decode import decode_template

        rec = generate_records_cached()[0]
        template = decode_template(rec.text, rec.cur, seq, layout)
        f0 = seq.fut_tokens[0]
        sess = tiny_model.session(hybrid_mask)
        logits = sess.extend(template)
        pred = logits[f0 - 1]  # prediction row for position f0
        assert np.isfinite(pred).all()
        # and it genuinely depends on the prompt content
        other = template.copy()
        other[seq.cur_block[0] + 1] = layout.visual_range[0] + 1
        out = tiny_model.session(hybrid_mask).extend(other)
        assert not np.array_equal(pred, out[f0 - 1])


_RECORDS_CACHE = []


def generate_records_cached():
    if not _RECORDS_CACHE:
        from jointdiff.toyworld import WorldConfig, generate_records

        _RECORDS_CACHE.extend(generate_records(WorldConfig(), 12, seed=77))
    return _RECORDS_CACHE


class TestSymmetryAtDegenerateInit:
    def test_equal_init_logits_invariant_to_in_block_permutation(self, seq, layout, hybrid_mask):
        """With all-equal token embeddings, downstream positions that attend
        to a whole bidirectional block see the same key/value multiset after
        permuting tokens inside it, so their logits cannot change."""
        model = TransformerModel(ModelConfig(layers=1, heads=1, width=16, init_seed=0),
                                 layout.total, seq.context_len)
        # collapse token identity: every embedding row identical
        row = model.tok.table.value[0].copy()
        model.tok.table.value[...] = row
        from jointdiff.decode import decode_template

        rec = generate_records_cached()[0]
        template = decode_template(rec.text, rec.cur, seq, layout)
        f0, f1 = seq.fut_tokens
        swapped = template.copy()
        swapped[[f0, f0 + 1]] = swapped[[f0 + 1, f0]]
        base = model.session(hybrid_mask).extend(template)
        out = model.session(hybrid_mask).extend(swapped)
        a0 = seq.act_tokens[0]
        np.testing.assert_allclose(base[a0 - 1 :], out[a0 - 1 :], atol=1e-5)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, tiny_model, layout, seq):
        path = str(tmp_path / "m.ckpt")
        opt = Adam(tiny_model.store)
        save_model(path, tiny_model, layout, seq, meta={"epoch": 3}, optimizer=opt)
        model2, layout2, seq2, header, arrays = load_model(path)
        assert layout2 == layout
        assert seq2 == seq
        assert header["meta"]["epoch"] == 3
        for p in tiny_model.store:
            assert np.array_equal(p.value, model2.store[p.name].value)
        # a second save of the loaded model is byte-identical
        path2 = str(tmp_path / "m2.ckpt")
        opt2 = Adam(model2.store)
        opt2.load_state(arrays, header["optimizer"]["t"])
        save_model(path2, model2, layout2, seq2, meta={"epoch": 3}, optimizer=opt2)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(p))

    def test_truncated_payload_rejected(self, tmp_path, tiny_model, layout, seq):
        path = tmp_path / "m.ckpt"
        save_model(str(path), tiny_model, layout, seq)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 200])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_save_is_deterministic(self, tmp_path, tiny_model, layout, seq):
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        save_checkpoint(str(a), {"k": 1}, dict(tiny_model.store.state_arrays()))
        save_checkpoint(str(b), {"k": 1}, dict(tiny_model.store.state_arrays()))
        assert a.read_bytes() == b.read_bytes()
