import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchalign.textgen import (END, TEMPLATES, DescriptionError, DescriptionSet,
                                 OfflineCorpusClient, PromptTemplate, RecordedClient,
                                 Vocabulary, build_vocabulary, clean_sentences,
                                 detokenize, generate_descriptions, load_descriptions,
                                 render_prompt, tokenize)


class TestTemplates:
    def test_template_4_wording(self):
        out = render_prompt(TEMPLATES[4], "cat")
        assert out == "What are useful visual features for distinguishing a cat in a photo?"

    def test_template_1_wording(self):
        assert render_prompt(TEMPLATES[1], "suitcase") == "a photo of a suitcase."

    def test_template_2_wording(self):
        assert render_prompt(TEMPLATES[2], "dog") == "A caption describing a photo of a dog."

    def test_template_3_wording(self):
        assert render_prompt(TEMPLATES[3], "horse") == "What does a horse look like?"

    def test_missing_placeholder_rejected(self):
        with pytest.raises(ValueError, match="placeholder"):
            PromptTemplate(9, "no slot here")

    def test_empty_category_rejected(self):
        with pytest.raises(ValueError):
            render_prompt(TEMPLATES[1], "")


class TestCleaning:
    def test_short_sentences_dropped_and_deduped(self):
        raw = "A star has five points. Nice one. a star has five points.   It shows deep notches."
        out = clean_sentences(raw)
        assert out == ["A star has five points.", "It shows deep notches."]

    def test_whitespace_normalized(self):
        assert clean_sentences("many   spaces\tbetween words.") == ["many spaces between words."]

    def test_newlines_split_list_style_output(self):
        out = clean_sentences("five pointed star shape\nfour crossing solid bars\n")
        assert out == ["five pointed star shape", "four crossing solid bars"]


class TestGenerateDescriptions:
    RESPONSES = {
        render_prompt(TEMPLATES[4], "star"):
            "A star has five points. It shows deep notches. Ok. The spikes radiate outward. "
            "Edges look sharp and thin. A pointed symmetric outline appears. Extra sentence here too.",
        render_prompt(TEMPLATES[4], "cross"):
            "A cross has four arms. The arms meet at right angles. Bars run both ways. "
            "It looks like a plus sign. Outline is blocky overall.",
    }

    def test_selects_first_k_after_filtering(self):
        client = RecordedClient(self.RESPONSES)
        ds = generate_descriptions(["star"], TEMPLATES[4], client, k=2)
        assert ds.sentences["star"] == ["A star has five points.", "It shows deep notches."]

    def test_cache_skips_the_client(self, tmp_path):
        client = RecordedClient(self.RESPONSES)
        a = generate_descriptions(["star", "cross"], TEMPLATES[4], client, k=3,
                                  cache_dir=tmp_path)
        assert client.calls == 2
        b = generate_descriptions(["star", "cross"], TEMPLATES[4], client, k=3,
                                  cache_dir=tmp_path)
        assert client.calls == 2  # warm cache: zero endpoint requests
        assert a.sentences == b.sentences

    def test_empty_response_is_an_error(self):
        client = RecordedClient({render_prompt(TEMPLATES[4], "star"): "tiny. no. eh."})
        with pytest.raises(DescriptionError, match="star"):
            generate_descriptions(["star"], TEMPLATES[4], client, k=3)

    def test_missing_category_names_it(self):
        client = RecordedClient({})
        with pytest.raises(DescriptionError, match="'star'"):
            generate_descriptions(["star"], TEMPLATES[4], client, k=3, max_workers=1)

    def test_offline_corpus_passthrough(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        recs = [{"category": "star", "template_id": 4,
                 "sentences": [f"Sentence number {i} about the star shape." for i in range(5)],
                 "source": "offline"}]
        path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        ds = generate_descriptions(["star"], TEMPLATES[4], OfflineCorpusClient(path), k=5)
        assert len(ds.sentences["star"]) == 5
        assert ds.source == "offline"


class TestDescriptionFiles:
    def test_round_trip(self, tmp_path):
        ds = DescriptionSet({"star": ["A star has five points."],
                             "cross": ["A cross has four arms.", "They meet at the center."]},
                            template_id=3, source="offline", data_digest="abc123")
        p = ds.save(tmp_path / "desc.jsonl")
        back = load_descriptions(p)
        assert back.sentences == ds.sentences
        assert back.template_id == 3
        assert back.source == "offline"
        assert back.data_digest == "abc123"

    def test_empty_category_rejected(self):
        with pytest.raises(DescriptionError):
            DescriptionSet({"star": []}, template_id=1, source="offline")


class TestVocabularyAndTokenize:
    def _vocab(self):
        ds = DescriptionSet({"star": ["A star has five sharp points."],
                             "cross": ["Equal bars cross at the center."]},
                            template_id=4, source="offline")
        return build_vocabulary(ds)

    def test_specials_dense_and_distinct(self):
        v = self._vocab()
        assert v.tokens[:4] == ["<pad>", "<start>", "<end>", "<unk>"]
        assert len(set(v.tokens)) == len(v.tokens)

    def test_empty_string_is_just_end(self):
        assert tokenize("", self._vocab(), 8) == [END]

    def test_case_folding(self):
        v = self._vocab()
        ids = tokenize("Star star STAR", v, 8)
        assert len(ids) == 4 and ids[0] == ids[1] == ids[2] and ids[-1] == END

    def test_truncation_keeps_end_marker(self):
        v = self._vocab()
        ids = tokenize("a star has five sharp points and more words", v, 4)
        assert len(ids) == 4 and ids[-1] == END

    @settings(max_examples=50, deadline=None)
    @given(st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd", "Zs")),
                   max_size=40))
    def test_tokenize_idempotent_through_detokenize(self, text):
        v = self._vocab()
        ids = tokenize(text, v, 16)
        again = tokenize(detokenize(ids, v), v, 16)
        # stable modulo OOV: every in-vocab word survives the round trip
        assert [i for i in again if i != END] == \
               [i for i in ids if i != END and i != 3] or 3 in ids

    def test_category_ids_concatenates_and_caps(self):
        ds = DescriptionSet({"star": ["A star has five sharp points.",
                                      "Deep notches separate the points."]},
                            template_id=4, source="offline")
        v = build_vocabulary(ds)
        ds.tokenize_all(v, max_len=6)
        ids = ds.category_ids("star", max_len=9)
        assert len(ids) == 9
        per_sentence = [tokenize(s, v, 6) for s in ds.sentences["star"]]
        assert ids == (per_sentence[0] + per_sentence[1])[:9]
