"""
The evaluation metrics on tiny inputs
=====================================

Small cases that can be checked by hand.
"""
from tisr.metrics import bleu, ce_labels, evaluate_corpus, meteor_exact, modified_precision, prf1, rouge_l

# clipped unigram precision: "the" appears at most twice in the reference
print(modified_precision("the the the the the the the", "the cat is on the mat", 1))  # 2/7

# LCS = "a c e": P = 3/5, R = 1, F1 = 0.75
print(rouge_l(["a b c d e"], ["a c e"]))

# one chunk of four matches: 1 - 0.5 * (1/4)**3
print(meteor_exact(["a b c d"], ["a b c d"]))
# two one-word chunks for two matches: penalty 0.5
print(meteor_exact(["b a"], ["a b"]))

print(bleu(["there is mass ."], ["there is a mass ."]))

gold = ce_labels("frontal and lateral views of the chest . there is mass . no edema .")
pred = ce_labels("frontal and lateral views of the chest . there is mass . there is edema .")
print(prf1([pred], [gold]))

print(evaluate_corpus(["there is mass ."], ["there is mass ."]))
