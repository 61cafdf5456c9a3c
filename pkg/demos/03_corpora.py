"""Styled question-answer corpora built from one shared fact grammar.

Every style sees the same questions and facts; only the answer decoration
differs, which is what lets an IRM learn the style and nothing else.
"""

from irmlab.datasets import CorpusSpec, Style, Tokenizer, generate_corpus, marker_rate

tok = Tokenizer.default()
print(f"vocabulary: {len(tok)} tokens")
corpora = {s: generate_corpus(CorpusSpec(s, seed=0, n_pairs=200), tok) for s in Style}
for i in range(2):
    print("Q:", tok.decode(corpora[Style.NEUTRAL][i].question))
    for s in Style:
        print(f"  {s.value:8s}", tok.decode(corpora[s][i].answer))

for s in (Style.ANGER, Style.SADNESS):
    for source in Style:
        toks = [t for p in corpora[source] for t in tok.tokens(p.answer)]
        print(f"{s.value} marker rate in {source.value} answers: {marker_rate(toks, s):.3f}")
