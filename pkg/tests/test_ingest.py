from __future__ import annotations

import json
import random

import pytest

from slicerchat.ingest import (
    Chunk,
    ChunkingMode,
    ChunkingPolicy,
    Document,
    QAPair,
    SourceKind,
    chunk_document,
    chunk_qa_pair,
    count_lines,
    count_tokens,
    extract_scene_summary,
    load_qa_dataset,
    read_corpus,
    scan_repository,
    tokenize,
    write_corpus,
)


def make_doc(text: str, kind: SourceKind = SourceKind.MARKDOWN_DOC) -> Document:
    return Document(id="doc", kind=kind, origin="doc", text=text, line_count=count_lines(text))


def words(n: int, prefix: str = "t") -> str:
    return " ".join(f"{prefix}{i}" for i in range(n))


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_words(self):
        assert tokenize("hello world") == ["hello", "world"]

    def test_punctuation_is_single_tokens(self):
        assert tokenize("def foo():") == ["def", "foo", "(", ")", ":"]

    def test_whitespace_never_tokenized(self):
        assert tokenize("  a\t\nb  ") == ["a", "b"]

    def test_underscore_and_digits_join_runs(self):
        assert tokenize("x_1=y2") == ["x_1", "=", "y2"]


class TestScanRepository:
    def test_empty_directory(self, tmp_path):
        result = scan_repository(tmp_path, [".py", ".md"])
        assert result.documents == []
        assert result.skipped == []

    def test_matches_and_kinds(self, tmp_path):
        (tmp_path / "a.py").write_text("print(1)\n")
        (tmp_path / "docs").mkdir()
        (tmp_path / "docs" / "b.md").write_text("# title\n")
        (tmp_path / "c.txt").write_text("ignored\n")
        result = scan_repository(tmp_path, [".py", ".md"])
        assert [d.origin for d in result.documents] == ["a.py", "docs/b.md"]
        assert [d.kind for d in result.documents] == [
            SourceKind.PYTHON_CODE,
            SourceKind.MARKDOWN_DOC,
        ]
        assert all(d.id == d.origin for d in result.documents)

    def test_case_insensitive_suffix(self, tmp_path):
        (tmp_path / "A.PY").write_text("x = 1\n")
        result = scan_repository(tmp_path, [".py"])
        assert [d.origin for d in result.documents] == ["A.PY"]
        assert result.documents[0].kind == SourceKind.PYTHON_CODE

    def test_non_utf8_skipped_and_counted(self, tmp_path):
        (tmp_path / "ok.py").write_text("x = 1\n")
        (tmp_path / "bad.py").write_bytes(b"\xff\xfe\x00garbage")
        result = scan_repository(tmp_path, [".py"])
        assert [d.origin for d in result.documents] == ["ok.py"]
        assert result.skipped == ["bad.py"]

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_repository(tmp_path / "nope", [".py"])

    def test_order_is_lexicographic(self, tmp_path):
        # Create in non-sorted order; output must not depend on creation order.
        for name in ["z.py", "a.py", "m.py"]:
            (tmp_path / name).write_text("pass\n")
        result = scan_repository(tmp_path, [".py"])
        assert [d.origin for d in result.documents] == ["a.py", "m.py", "z.py"]

    def test_line_count_invariant(self, tmp_path):
        (tmp_path / "a.py").write_text("one\ntwo\nthree\n")
        result = scan_repository(tmp_path, [".py"])
        doc = result.documents[0]
        assert doc.line_count == count_lines(doc.text) == 4


class TestLoadQaDataset:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        path.write_text("")
        assert load_qa_dataset(path) == []

    def test_order_preserved(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        rows = [
            {"question": f"q{i}", "answer": f"a{i}", "origin": f"t/{i}"} for i in range(3)
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        pairs = load_qa_dataset(path)
        assert [p.question for p in pairs] == ["q0", "q1", "q2"]
        assert pairs[1].origin == "t/1"

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        path.write_text('{"question": "q", "answer": "a"}\n{oops\n')
        with pytest.raises(ValueError, match="line 2"):
            load_qa_dataset(path)

    def test_empty_question_rejected(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        path.write_text('{"question": "", "answer": "a"}\n')
        with pytest.raises(ValueError, match="question"):
            load_qa_dataset(path)

    def test_empty_answer_rejected(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        path.write_text('{"question": "q", "answer": ""}\n')
        with pytest.raises(ValueError, match="answer"):
            load_qa_dataset(path)

    def test_large_synthetic_file(self, tmp_path):
        path = tmp_path / "qa.jsonl"
        with path.open("w") as f:
            for i in range(2048):
                f.write(json.dumps({"question": f"q{i}", "answer": f"a{i}"}) + "\n")
        assert len(load_qa_dataset(path)) == 2048


class TestExtractSceneSummary:
    def test_empty_scene(self):
        summary = extract_scene_summary("<MRML></MRML>")
        assert summary.nodes == []
        assert summary.count == 0

    def test_two_nodes(self):
        xml = (
            '<MRML><Volume id="vtkMRMLScalarVolumeNode1" name="CT_chest"/>'
            '<Model id="m1" name="skull"/></MRML>'
        )
        summary = extract_scene_summary(xml)
        assert summary.count == 2
        assert summary.nodes[0] == {
            "type": "Volume",
            "id": "vtkMRMLScalarVolumeNode1",
            "name": "CT_chest",
        }
        assert summary.nodes[1] == {"type": "Model", "id": "m1", "name": "skull"}

    def test_missing_attributes_default_to_empty(self):
        summary = extract_scene_summary("<MRML><Crosshair/></MRML>")
        assert summary.nodes == [{"type": "Crosshair", "id": "", "name": ""}]

    def test_nested_children_ignored(self):
        summary = extract_scene_summary('<MRML><A id="a"><B id="b"/></A></MRML>')
        assert [n["type"] for n in summary.nodes] == ["A"]

    def test_malformed_xml(self):
        with pytest.raises(ValueError, match="malformed scene XML"):
            extract_scene_summary("<MRML><unclosed></MRML>")

    def test_empty_string(self):
        with pytest.raises(ValueError, match="malformed scene XML"):
            extract_scene_summary("")

    def test_canonical_json_is_stable(self):
        xml = '<MRML><Volume id="v" name="n"/></MRML>'
        a = extract_scene_summary(xml).to_json()
        b = extract_scene_summary(xml).to_json()
        assert a == b
        assert json.loads(a)["count"] == 1


class TestChunkingPolicy:
    def test_defaults(self):
        policy = ChunkingPolicy()
        assert (policy.max_tokens, policy.overlap) == (200, 50)

    def test_overlap_must_be_smaller(self):
        with pytest.raises(ValueError):
            ChunkingPolicy(max_tokens=50, overlap=50)

    def test_negative_overlap_rejected(self):
        with pytest.raises(ValueError):
            ChunkingPolicy(max_tokens=50, overlap=-1)


def spans_of(chunks: list[Chunk]) -> list[tuple[int, int]]:
    return [(c.token_start, c.token_end) for c in chunks]


class TestChunkDocumentTokenOnly:
    def test_fits_in_one(self):
        doc = make_doc(words(120))
        chunks = chunk_document(doc, ChunkingPolicy(200, 50))
        assert spans_of(chunks) == [(0, 120)]
        assert chunks[0].text == doc.text

    def test_stride_splits_450(self):
        doc = make_doc(words(450))
        chunks = chunk_document(doc, ChunkingPolicy(200, 50))
        assert spans_of(chunks) == [(0, 200), (150, 350), (300, 450)]

    def test_empty_document(self):
        assert chunk_document(make_doc(""), ChunkingPolicy()) == []

    def test_chunk_text_token_counts(self):
        doc = make_doc("alpha (beta) gamma; delta\nepsilon zeta", SourceKind.PYTHON_CODE)
        for chunk in chunk_document(doc, ChunkingPolicy(max_tokens=4, overlap=1)):
            assert count_tokens(chunk.text) == chunk.token_end - chunk.token_start

    def test_seq_is_sequential(self):
        doc = make_doc(words(450))
        chunks = chunk_document(doc, ChunkingPolicy(200, 50))
        assert [c.seq for c in chunks] == [0, 1, 2]


class TestChunkDocumentStructureAware:
    def test_markdown_sections_merge(self):
        # Each section: "#" + heading word + 78 body words = 80 tokens.
        section1 = "# s1\n" + words(78, "a")
        section2 = "# s2\n" + words(78, "b")
        doc = make_doc(section1 + "\n" + section2)
        policy = ChunkingPolicy(200, 50, ChunkingMode.STRUCTURE_AWARE)
        chunks = chunk_document(doc, policy)
        assert len(chunks) == 1
        assert chunks[0].token_end - chunks[0].token_start == 160

    def test_python_definition_boundaries(self):
        text = "import os\n\ndef a():\n    pass\n\nclass B:\n    pass\n"
        doc = make_doc(text, SourceKind.PYTHON_CODE)
        # Segments are 2, 6 and 4 tokens; the first two merge within 8.
        chunks = chunk_document(doc, ChunkingPolicy(8, 2, ChunkingMode.STRUCTURE_AWARE))
        assert spans_of(chunks) == [(0, 8), (8, 12)]

    def test_indented_def_is_not_a_boundary(self):
        text = "class B:\n    def m(self):\n        pass\n"
        doc = make_doc(text, SourceKind.PYTHON_CODE)
        chunks = chunk_document(doc, ChunkingPolicy(200, 50, ChunkingMode.STRUCTURE_AWARE))
        assert len(chunks) == 1

    def test_oversized_segment_falls_back_to_stride(self):
        text = "# head\n" + words(20)
        doc = make_doc(text)
        chunks = chunk_document(doc, ChunkingPolicy(8, 2, ChunkingMode.STRUCTURE_AWARE))
        # 22 tokens in one segment; stride 6 inside it.
        assert spans_of(chunks) == [(0, 8), (6, 14), (12, 20), (18, 22)]

    def test_matches_token_only_when_no_boundaries(self):
        doc = make_doc(words(450), SourceKind.PYTHON_CODE)
        policy_s = ChunkingPolicy(200, 50, ChunkingMode.STRUCTURE_AWARE)
        policy_t = ChunkingPolicy(200, 50, ChunkingMode.TOKEN_ONLY)
        assert spans_of(chunk_document(doc, policy_s)) == spans_of(
            chunk_document(doc, policy_t)
        )


def random_document(rng: random.Random) -> Document:
    pieces = []
    for _ in range(rng.randrange(0, 400)):
        roll = rng.random()
        if roll < 0.6:
            pieces.append(rng.choice(["alpha", "beta", "gamma", "x1", "foo_bar"]))
        elif roll < 0.8:
            pieces.append(rng.choice(["(", ")", ":", "=", ".", ","]))
        else:
            pieces.append(rng.choice(["\n", "\n\n", "# head\n", "def f():\n"]))
        pieces.append(rng.choice([" ", " ", "\n"]))
    kind = rng.choice([SourceKind.PYTHON_CODE, SourceKind.MARKDOWN_DOC])
    return make_doc("".join(pieces), kind)


def random_policy(rng: random.Random) -> ChunkingPolicy:
    max_tokens = rng.randrange(1, 60)
    return ChunkingPolicy(
        max_tokens=max_tokens,
        overlap=rng.randrange(0, max_tokens),
        mode=rng.choice([ChunkingMode.TOKEN_ONLY, ChunkingMode.STRUCTURE_AWARE]),
    )


class TestChunkingProperties:
    def test_coverage_bound_and_determinism(self):
        rng = random.Random(7)
        for _ in range(300):
            doc = random_document(rng)
            policy = random_policy(rng)
            chunks = chunk_document(doc, policy)
            total = count_tokens(doc.text)
            if total == 0:
                assert chunks == []
                continue
            covered = set()
            for c in chunks:
                assert c.token_end - c.token_start <= policy.max_tokens
                assert count_tokens(c.text) == c.token_end - c.token_start
                covered.update(range(c.token_start, c.token_end))
            assert covered == set(range(total))
            again = chunk_document(doc, policy)
            assert again == chunks

    def test_token_only_overlap_between_full_chunks(self):
        rng = random.Random(11)
        for _ in range(100):
            doc = random_document(rng)
            max_tokens = rng.randrange(2, 40)
            policy = ChunkingPolicy(max_tokens, rng.randrange(0, max_tokens))
            chunks = chunk_document(doc, policy)
            stride = policy.max_tokens - policy.overlap
            for a, b in zip(chunks, chunks[1:]):
                if (
                    a.token_end - a.token_start == policy.max_tokens
                    and b.token_end - b.token_start == policy.max_tokens
                ):
                    assert b.token_start == a.token_start + stride


class TestChunkQaPair:
    def test_template(self):
        chunk = chunk_qa_pair(QAPair(question="How do I X?", answer="Use Y.", origin="t/1"))
        assert chunk.text == "Q: How do I X?\nA: Use Y."
        assert chunk.kind == SourceKind.DISCOURSE_QA
        assert chunk.doc_id == "t/1"

    def test_long_answer_never_split(self):
        qa = QAPair(question="q", answer=words(500))
        chunk = chunk_qa_pair(qa)
        assert chunk.token_end - chunk.token_start == count_tokens(chunk.text)
        assert count_tokens(chunk.text) > 200  # exceeds the default chunk bound

    def test_minimal_pair(self):
        chunk = chunk_qa_pair(QAPair(question="a", answer="a"))
        assert chunk.text == "Q: a\nA: a"
        assert chunk.seq == 0


class TestCorpusFile:
    def test_round_trip(self, tmp_path):
        docs = [
            make_doc("x = 1\n", SourceKind.PYTHON_CODE),
            make_doc("# hi\n", SourceKind.MARKDOWN_DOC),
        ]
        docs[0].id = docs[0].origin = "a.py"
        docs[1].id = docs[1].origin = "b.md"
        path = tmp_path / "corpus.jsonl"
        write_corpus(docs, path)
        assert read_corpus(path) == docs

    def test_bad_record_names_line(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(ValueError, match="line 1"):
            read_corpus(path)
