import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedseq.data import (CLS, MASK, NUM_SPECIAL, PAD, SEP, UNK, UNK_GROUP, IngestError, PatientRecord, Visit,
                         Vocabulary, build_eval_examples, build_vocabulary, collate, encode_history,
                         filter_min_visits, load_cohort, make_nextvisit_example, map_code_to_group,
                         split_cohort, write_cohort_csv)


def visit(dx, t, age=50, year=2010):
    return Visit(tuple(dx), t, age, year)


def patient(pid, visit_dx, age0=50, year0=2010):
    return PatientRecord(pid, tuple(visit(dx, 10 * i, age0 + i, year0 + i) for i, dx in enumerate(visit_dx)))


@pytest.fixture
def g_patient():
    return PatientRecord("p1", (visit(["g7", "g9"], 0, 50, 2010), visit(["g7"], 100, 51, 2011)))


def test_map_code_hit_and_miss():
    assert map_code_to_group("I10", {"I10": "HTN"}) == "HTN"
    assert map_code_to_group("Z99X", {"I10": "HTN"}) == UNK_GROUP


def test_group_table_image_size():
    table = {f"c{i:05d}": f"grp{i % 416:03d}" for i in range(17009)}
    assert len(set(map_code_to_group(c, table) for c in table)) == 416


def test_vocabulary_small_and_shuffle_invariant():
    cohort = [patient("a", [["B"], ["A"]]), patient("b", [["A", "B"]])]
    v = build_vocabulary(cohort)
    assert v.size == 7 and v.token_id("A") == 5 and v.token_id("B") == 6
    assert build_vocabulary(cohort[::-1]) == v
    assert v.token_id("missing") == UNK


def test_vocabulary_416_groups():
    groups = [f"grp{i:03d}" for i in range(416)]
    cohort = [patient("p", [[g] for g in groups])]
    assert build_vocabulary(cohort).size == 421


def test_vocabulary_dict_roundtrip():
    v = Vocabulary(("a", "b", "c"), 50, 2000, 10)
    assert Vocabulary.from_dict(v.to_dict()) == v


def test_encode_history_layout(g_patient):
    v = Vocabulary(("g7", "g9"))
    seq = encode_history(g_patient, 2, v, 10)
    g7, g9 = v.token_id("g7"), v.token_id("g9")
    assert seq.token_ids.tolist() == [CLS, g7, g9, SEP, g7, SEP, PAD, PAD, PAD, PAD]
    assert seq.segment_ids.tolist() == [0, 0, 0, 0, 1, 1, 0, 0, 0, 0]
    assert seq.position_ids.tolist() == [0, 0, 1, 2, 0, 1, 0, 0, 0, 0]
    assert seq.attention_mask.tolist() == [1, 1, 1, 1, 1, 1, 0, 0, 0, 0]
    assert seq.age_ids[:6].tolist() == [50, 50, 50, 50, 51, 51]
    assert seq.year_ids[:6].tolist() == [20, 20, 20, 20, 21, 21]
    prefix = encode_history(g_patient, 1, v, 10)
    assert prefix.token_ids.tolist() == [CLS, g7, g9, SEP] + [PAD] * 6


def test_encode_history_drops_oldest_visit():
    # each visit takes 3 slots with its SEP: CLS + 3 visits = 10 > 8, CLS + 2 visits = 7
    p = patient("p", [["a", "b"], ["c", "d"], ["e", "f"]])
    v = build_vocabulary([p])
    seq = encode_history(p, 3, v, 8)
    assert seq.first_visit == 1 and not seq.truncated
    ids = [v.token_id(g) for g in "cdef"]
    assert seq.token_ids.tolist() == [CLS, ids[0], ids[1], SEP, ids[2], ids[3], SEP, PAD]


def test_encode_history_capacity_rule():
    # visits of 3 diagnoses take 4 slots with their SEP; L=9 fits CLS + two visits
    p = patient("p", [["a", "b", "c"], ["d", "e", "f"], ["g", "h", "i"]])
    v = build_vocabulary([p])
    seq = encode_history(p, 3, v, 9)
    assert seq.first_visit == 1
    ids = [v.token_id(g) for g in "defghi"]
    assert seq.token_ids.tolist() == [CLS, *ids[:3], SEP, *ids[3:], SEP]


def test_encode_history_truncates_lone_visit():
    p = patient("p", [list("abcdefghij")])
    v = build_vocabulary([p])
    seq = encode_history(p, 1, v, 6)
    assert seq.truncated
    assert seq.token_ids.tolist() == [CLS] + [v.token_id(g) for g in "abcd"] + [SEP]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=5), min_size=1, max_size=8),
       st.integers(3, 30))
def test_encode_history_invariants(visit_dx, L):
    p = patient("p", visit_dx)
    v = build_vocabulary([p])
    seq = encode_history(p, p.num_visits, v, L)
    tok = seq.token_ids
    assert len(tok) == L and tok[0] == CLS
    n_real = int(seq.attention_mask.sum())
    assert (tok[:n_real] != PAD).all() and (tok[n_real:] == PAD).all()
    assert tok[n_real - 1] == SEP
    assert MASK not in tok
    # the most recent visit is always represented
    assert (seq.segment_ids[n_real - 1] == (p.num_visits - 1 - seq.first_visit) % 2)


def test_nextvisit_labels(g_patient):
    v = Vocabulary(("g7", "g9"))
    ex = make_nextvisit_example(g_patient, 1, v, 10)
    assert ex.labels.tolist() == [1, 0]
    p = PatientRecord("q", (visit(["g7"], 0), visit(["g7", "g9"], 5)))
    assert make_nextvisit_example(p, 1, v, 10).labels.sum() == 2
    with pytest.raises(ValueError):
        make_nextvisit_example(g_patient, 2, v, 10)


def test_filter_min_visits():
    cohort = [patient(str(n), [["a"]] * n) for n in (1, 3, 5, 16)]
    assert filter_min_visits(cohort, 1) == cohort
    assert [p.patient_id for p in filter_min_visits(cohort, 15)] == ["16"]
    once = filter_min_visits(cohort, 3)
    assert filter_min_visits(once, 3) == once
    sizes = [len(filter_min_visits(cohort, t)) for t in range(1, 20)]
    assert sizes == sorted(sizes, reverse=True)


def test_split_cohort():
    cohort = [patient(str(i), [["a"]]) for i in range(10)]
    train, test = split_cohort(cohort, 0.8, seed=3)
    assert (len(train), len(test)) == (8, 2)
    assert split_cohort(cohort, 0.8, seed=3) == (train, test)
    ids_tr, ids_te = {p.patient_id for p in train}, {p.patient_id for p in test}
    assert not ids_tr & ids_te and ids_tr | ids_te == {p.patient_id for p in cohort}


def test_eval_examples_are_frozen(small_cohort, small_vocab):
    a = build_eval_examples(small_cohort, small_vocab, 24, seed=5)
    b = build_eval_examples(small_cohort, small_vocab, 24, seed=5)
    assert [e.pivot_j for e in a] == [e.pivot_j for e in b]
    assert len(a) == sum(p.num_visits >= 2 for p in small_cohort)


def test_collate_stacks_lanes(g_patient):
    v = Vocabulary(("g7", "g9"))
    b = collate([encode_history(g_patient, 2, v, 10), encode_history(g_patient, 1, v, 10)])
    assert b.shape == (2, 10)
    assert b.trim().shape == (2, 6)


def test_visit_validation():
    with pytest.raises(ValueError):
        Visit((), 0, 10, 2000)
    assert Visit(("a", "a", "b"), 0, 1, 2000).diagnoses == ("a", "b")
    with pytest.raises(ValueError):
        PatientRecord("p", (visit(["a"], 10), visit(["a"], 0)))


def test_csv_roundtrip(tmp_path, small_cohort):
    write_cohort_csv(small_cohort, tmp_path / "visits.csv", tmp_path / "groups.csv")
    loaded = load_cohort(tmp_path / "visits.csv", tmp_path / "groups.csv")
    assert sorted(loaded, key=lambda p: p.patient_id) == sorted(small_cohort, key=lambda p: p.patient_id)


def test_csv_errors_report_lines(tmp_path):
    (tmp_path / "groups.csv").write_text("raw_code,group\nI10,HTN\n")
    (tmp_path / "visits.csv").write_text(
        "patient_id,admit_time_hours,age_years,calendar_year,raw_code\n"
        "p1,0,50,2010,I10\n"
        "p1,abc,50,2010,I10\n"
        "p2,0,-3,2010,I10\n")
    with pytest.raises(IngestError) as err:
        load_cohort(tmp_path / "visits.csv", tmp_path / "groups.csv")
    assert [ln for ln, _ in err.value.problems] == [3, 4]


def test_unmapped_code_becomes_unk_group(tmp_path):
    (tmp_path / "groups.csv").write_text("raw_code,group\nI10,HTN\n")
    (tmp_path / "visits.csv").write_text(
        "patient_id,admit_time_hours,age_years,calendar_year,raw_code\np1,0,50,2010,XX\n")
    (p,) = load_cohort(tmp_path / "visits.csv", tmp_path / "groups.csv")
    assert p.visits[0].diagnoses == (UNK_GROUP,)
    assert build_vocabulary([p]).token_id(UNK_GROUP) == NUM_SPECIAL
