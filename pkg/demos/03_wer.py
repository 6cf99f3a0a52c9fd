"""
Word error rate with an edit breakdown
======================================
"""

from alakd.metrics import insertion_rate, wer

e = wer("a b c".split(), "a x c d".split())
print(f"S={e.substitutions} I={e.insertions} D={e.deletions} WER={e.wer:.2f}%")

# an empty reference counts every emitted token as an insertion
print(wer([], "the cat sat down".split()).wer)

# hallucination on noise-only input is just the mean hypothesis length
print(insertion_rate([[], ["uh"], ["the", "the", "the"]]))
