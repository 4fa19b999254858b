import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointdiff.errors import ConfigError, FormatError, InputError
from jointdiff.toyworld import (
    Dataset,
    GridState,
    WorldConfig,
    apply_actions,
    canonical_actions,
    dataset_read,
    dataset_write,
    generate_episode,
    generate_records,
    oracle_actions,
    parse_tokens,
    render_tokens,
    stage1_record,
    text_art,
)

from reference_impls import row_first_shortest_path

cells = st.tuples(st.integers(0, 5), st.integers(0, 5))


class TestCanonicalActions:
    def test_down_then_right(self):
        assert canonical_actions((0, 0), (1, 2)) == ["D", "R", "R"]

    def test_same_cell_empty(self):
        assert canonical_actions((2, 2), (2, 2)) == []

    def test_straight_up(self):
        assert canonical_actions((3, 1), (0, 1)) == ["U", "U", "U"]

    @settings(max_examples=200, deadline=None)
    @given(cells, cells)
    def test_matches_row_first_bfs_oracle(self, start, goal):
        assert canonical_actions(start, goal) == row_first_shortest_path(start, goal, 6, 6)

    def test_exhaustive_length_bound_on_6x6(self):
        cells6 = [(r, c) for r in range(6) for c in range(6)]
        for s in cells6:
            for g in cells6:
                path = canonical_actions(s, g)
                assert len(path) <= 10
                assert len(path) == abs(s[0] - g[0]) + abs(s[1] - g[1])


class TestGenerateEpisode:
    def test_fixed_seed_reproduces_episodes(self, world):
        a = generate_records(world, 20, seed=4)
        b = generate_records(world, 20, seed=4)
        assert [r.to_json() for r in a] == [r.to_json() for r in b]

    def test_actions_apply_to_future(self, world):
        rng = np.random.default_rng(8)
        for _ in range(200):
            ep = generate_episode(rng, world)
            assert apply_actions(ep.current, ep.actions).agent == ep.future.agent
            assert ep.future.agent == ep.current.goal_of_color(ep.target_color)

    def test_agent_on_goal_gives_empty_actions(self, world):
        rng = np.random.default_rng(0)
        found = False
        for _ in range(500):
            ep = generate_episode(rng, world)
            if ep.current.agent == ep.current.goal_of_color(ep.target_color):
                assert ep.actions == []
                found = True
        assert found, "placement should sometimes start on the target goal"

    def test_instruction_names_present_color(self, world):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ep = generate_episode(rng, world)
            colors = {c for c, _, _ in ep.current.goals}
            assert ep.target_color in colors

    def test_impossible_placement_is_config_error(self):
        tiny = WorldConfig(width=1, height=1, n_colors=1, max_actions=0)
        with pytest.raises(ConfigError):
            generate_episode(np.random.default_rng(0), tiny)


class TestRendering:
    def test_no_objects_rendering_rejected_roundtrip_needs_agent(self, world, layout):
        empty = GridState(6, 6, (0, 0), [])
        toks = render_tokens(empty, world, layout)
        base = layout.visual_range[0]
        assert toks.count(base) == 35  # all empty except the agent cell

    def test_round_trip_for_states_with_agent_on_empty(self, world, layout):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            cells_ = rng.choice(36, size=4, replace=False)
            goals = [(c, int(cells_[c] // 6), int(cells_[c] % 6)) for c in range(3)]
            agent = (int(cells_[3] // 6), int(cells_[3] % 6))
            state = GridState(6, 6, agent, goals)
            back = parse_tokens(render_tokens(state, world, layout), world, layout)
            assert back.agent == state.agent
            assert sorted(back.goals) == sorted(state.goals)

    def test_covered_goal_color_recovered_as_missing_color(self, world, layout):
        state = GridState(6, 6, (1, 1), [(0, 1, 1), (1, 0, 0), (2, 5, 5)])
        back = parse_tokens(render_tokens(state, world, layout), world, layout)
        assert sorted(back.goals) == sorted(state.goals)

    def test_single_cell_difference_changes_one_token(self, world, layout):
        goals = [(0, 2, 2), (1, 3, 3), (2, 4, 4)]
        a = render_tokens(GridState(6, 6, (0, 0), goals), world, layout)
        b = render_tokens(GridState(6, 6, (0, 1), goals), world, layout)
        assert sum(x != y for x, y in zip(a, b)) == 2  # agent left one cell, entered another
        c = render_tokens(GridState(6, 6, (0, 0), [(0, 2, 2), (1, 3, 3), (2, 4, 5)]), world, layout)
        assert sum(x != y for x, y in zip(a, c)) == 2

    def test_text_art_glyphs(self, world, layout):
        state = GridState(6, 6, (0, 0), [(0, 0, 1), (1, 1, 0), (2, 5, 5)])
        art = text_art(render_tokens(state, world, layout), world, layout)
        lines = art.splitlines()
        assert lines[0][0] == "A" and lines[0][1] == "r"
        assert lines[1][0] == "g" and lines[5][5] == "b"

    def test_too_many_colors_rejected(self, layout):
        with pytest.raises(InputError):
            WorldConfig(n_colors=9)


class TestDataset:
    def test_write_read_round_trip(self, tmp_path, world, layout):
        recs = generate_records(world, 1000, seed=6)
        path = tmp_path / "ds.jsonl"
        dataset_write(str(path), Dataset(world, layout, "episodes", recs))
        back = dataset_read(str(path))
        assert [r.to_json() for r in back.records] == [r.to_json() for r in recs]
        assert back.layout == layout
        assert back.cfg == world

    def test_empty_corpus_header_only(self, tmp_path, world, layout):
        path = tmp_path / "empty.jsonl"
        dataset_write(str(path), Dataset(world, layout, "episodes", []))
        assert len(path.read_text().strip().splitlines()) == 1
        assert dataset_read(str(path)).records == []

    def test_truncated_line_reports_line_number(self, tmp_path, world, layout):
        path = tmp_path / "bad.jsonl"
        dataset_write(str(path), Dataset(world, layout, "episodes", generate_records(world, 3, seed=0)))
        txt = path.read_text().splitlines()
        txt[2] = txt[2][: len(txt[2]) // 2]
        path.write_text("\n".join(txt) + "\n")
        with pytest.raises(FormatError, match="line 3"):
            dataset_read(str(path))

    def test_layout_mismatch_rejected(self, tmp_path, world, layout):
        from jointdiff.tokenspace import build_layout

        path = tmp_path / "ds.jsonl"
        dataset_write(str(path), Dataset(world, layout, "episodes", []))
        with pytest.raises(FormatError):
            dataset_read(str(path), expect_layout=build_layout(2, 2, 2))

    def test_version_mismatch_rejected(self, tmp_path, world, layout):
        path = tmp_path / "ds.jsonl"
        dataset_write(str(path), Dataset(world, layout, "episodes", []))
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace('"format_version":1', '"format_version":99')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="version"):
            dataset_read(str(path))


class TestCorpusInvariants:
    def test_inverse_kinematics_soundness_and_oracle_recovery(self, world, layout):
        recs = generate_records(world, 500, seed=12)
        for rec in recs:
            assert oracle_actions(rec, world, layout) == rec.act

    def test_ground_truth_tokens_lie_in_admissible_sets(self, world, layout, seq):
        from jointdiff.tokenspace import admissible_set, assemble

        recs = generate_records(world, 200, seed=13)
        for rec in recs:
            ts = assemble(rec.text, rec.cur, rec.fut, rec.act, layout, seq)
            f0, f1 = seq.fut_tokens
            for p in range(f0, f1):
                assert ts.ids[p] in admissible_set(p, seq, layout)
            a0 = seq.act_tokens[0]
            for k in range(len(rec.act) + 1):
                assert ts.ids[a0 + k] in admissible_set(a0 + k, seq, layout)

    def test_stage1_truncation_prefix_dynamics(self, world, layout):
        rng = np.random.default_rng(3)
        ep = generate_episode(rng, world)
        while len(ep.actions) < 2:
            ep = generate_episode(rng, world)
        rec = stage1_record(ep, 1, world, layout)
        assert rec.act is None
        inter = apply_actions(ep.current, ep.actions[:1])
        assert rec.fut == render_tokens(inter, world, layout)

    def test_stage1_records_have_no_actions(self, world):
        recs = generate_records(world, 50, seed=14, stage1=True)
        assert all(r.act is None for r in recs)
