import numpy as np

from defhtr.data import Charset
from defhtr.metrics import aggregate, cer, levenshtein, score, summary, wer, write_report


def dp_distance(a, b):
    """Full Wagner-Fischer table."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def test_examples():
    assert cer("abc", "abd").rate == 1 / 3
    assert cer("", "").rate == 0 and cer("", "ab").empty_reference
    assert wer("the cat sat", "the bat sat").rate == 1 / 3
    ref, hyp = "mine seems to know how to do", "miare seemns tro knwow how to do"
    assert cer(ref, hyp).distance == dp_distance(ref, hyp)
    assert wer(ref, hyp).distance == dp_distance(ref.split(), hyp.split())


def test_matches_dp_oracle_on_random_pairs(rng):
    alphabet = list("abc ")
    for _ in range(3000):
        a = "".join(rng.choice(alphabet, rng.integers(0, 12)))
        b = "".join(rng.choice(alphabet, rng.integers(0, 12)))
        assert cer(a, b).distance == dp_distance(a, b)
        assert wer(a, b).distance == dp_distance(a.split(), b.split())


def test_charset_symbols_count_as_one():
    cs = Charset(["a", "ch"])
    assert cer("ach", "aa", cs).distance == 1 and cer("ach", "aa").distance == 2


def test_aggregate_is_length_weighted():
    rows = [cer("abcd", "abcd"), cer("ab", "xy")]
    assert aggregate(rows) == 2 / 6
    assert levenshtein([], [1, 2]) == 2


def test_report_layout(tmp_path):
    rows = score(["s1", "s\t2"], ["ab", "a b"], ["ab", "a c"])
    write_report(tmp_path / "r.tsv", rows)
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0] == "sample_id\tref\thyp\tcer\twer"
    assert lines[2].split("\t") == ["s 2", "a b", "a c", "0.333333", "0.500000"]
    assert summary(rows) == {"samples": 2, "cer": 1 / 5, "wer": 1 / 3}
