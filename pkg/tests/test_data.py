import json
from collections import Counter

import numpy as np
import pytest

from ticketlab.data import (ANSWER, ANSWERS, N_ANSWERS, Category, DataConfig, QuestionError, Scene,
                            decode, encode, generate_dataset, oracle_answer, question_category,
                            region_features, split_by_scene)


@pytest.fixture(scope="module")
def ds3000():
    return generate_dataset(5, 3000)


class TestOracle:
    def test_count(self):
        scene = Scene.of(("red", "circle"), ("red", "circle"))
        assert oracle_answer(scene, encode("how many circle")) == ANSWER["2"]

    def test_empty_scene(self):
        assert oracle_answer(Scene(()), encode("is there a blue square")) == ANSWER["no"]

    def test_color_of_unique_shape(self):
        scene = Scene.of(("green", "triangle"))
        assert oracle_answer(scene, encode("what color is the triangle")) == ANSWER["green"]

    def test_yes(self):
        scene = Scene.of(("green", "triangle"), ("blue", "square"))
        assert oracle_answer(scene, encode("is there a blue square")) == ANSWER["yes"]
        assert oracle_answer(scene, encode("is there a green square")) == ANSWER["no"]

    def test_ambiguous_color_question(self):
        scene = Scene.of(("green", "star"), ("red", "star"))
        assert oracle_answer(scene, encode("what color is the star")) == ANSWER["<unanswerable>"]

    @pytest.mark.parametrize("text", ["how many", "is there a red", "what color is the red",
                                      "how many red circle", "is there a circle red"])
    def test_malformed(self, text):
        with pytest.raises(QuestionError):
            oracle_answer(Scene(()), encode(text))

    def test_unknown_word(self):
        with pytest.raises(QuestionError):
            encode("how many hexagon")

    def test_answer_vocabulary(self):
        assert N_ANSWERS == 16
        assert ANSWERS[:2] == ("yes", "no")

    def test_category(self):
        assert question_category(encode("how many star")) is Category.NUMBER

    def test_scene_positions_unique(self):
        with pytest.raises(ValueError):
            Scene.of(("red", "circle", 1), ("blue", "star", 1))


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_dataset(3, 200), generate_dataset(3, 200)
        assert a.to_jsonl() == b.to_jsonl()
        assert a.regions.tobytes() == b.regions.tobytes()
        assert generate_dataset(4, 200).to_jsonl() != a.to_jsonl()

    def test_balanced(self, ds3000):
        counts = Counter(ds3000.categories.tolist())
        assert all(abs(counts[c] - 1000) <= 1 for c in Category)

    def test_answers_recomputed(self, ds3000):
        for i in range(len(ds3000)):
            q = ds3000.question(i)
            assert ds3000.answers[i] == oracle_answer(ds3000.scenes[i], q)
            assert question_category(q) == ds3000.categories[i]

    def test_answer_distribution_not_degenerate(self, ds3000):
        for c in Category:
            answers = ds3000.answers[ds3000.categories == c]
            assert Counter(answers.tolist()).most_common(1)[0][1] <= 0.7 * answers.size

    def test_other_only_when_unambiguous(self, ds3000):
        other = ds3000.answers[ds3000.categories == Category.OTHER]
        assert ANSWER["<unanswerable>"] not in other

    def test_scene_sizes(self, ds3000):
        sizes = {len(s.objects) for s in ds3000.scenes}
        assert min(sizes) >= 1 and max(sizes) <= 8

    def test_null_slots_fixed(self, ds3000):
        cfg = DataConfig()
        null = cfg.projection()[-1]
        for i in range(20):
            occupied = {o.position for o in ds3000.scenes[i].objects}
            for slot in range(cfg.n_regions):
                if slot not in occupied:
                    np.testing.assert_array_equal(ds3000.regions[i, slot], null)

    def test_noise_level(self):
        cfg = DataConfig()
        scene = Scene.of(("red", "circle", 0))
        clean = region_features(scene, cfg, None)
        noisy = np.stack([region_features(scene, cfg, np.random.default_rng(i))[0]
                          for i in range(400)])
        assert np.std(noisy - clean[0]) == pytest.approx(0.05, rel=0.1)

    def test_needs_examples(self):
        with pytest.raises(ValueError):
            generate_dataset(0, 0)


class TestSplits:
    def test_disjoint_and_proportional(self, ds3000):
        sp = split_by_scene(ds3000, 1)
        keys = [{s.key() for s in part.scenes} for part in sp]
        assert not keys[0] & keys[1] and not keys[0] & keys[2] and not keys[1] & keys[2]
        assert sum(len(p) for p in sp) == len(ds3000)
        assert len(sp.train) / len(ds3000) == pytest.approx(0.8, abs=0.02)
        assert len(sp.test) / len(ds3000) == pytest.approx(0.1, abs=0.02)

    def test_deterministic(self, ds3000):
        a, b = split_by_scene(ds3000, 1), split_by_scene(ds3000, 1)
        assert a.test.to_jsonl() == b.test.to_jsonl()


class TestExport:
    def test_jsonl_round_trip(self):
        ds = generate_dataset(2, 30)
        lines = ds.to_jsonl().splitlines()
        assert len(lines) == 30
        for i, line in enumerate(lines):
            rec = json.loads(line)
            assert set(rec) == {"scene", "tokens", "answer", "category"}
            scene = Scene.from_json(rec["scene"])
            assert oracle_answer(scene, rec["tokens"]) == rec["answer"]
            assert rec["category"] == Category(int(ds.categories[i])).label
            assert decode(rec["tokens"]).split()[0] in ("is", "how", "what")
