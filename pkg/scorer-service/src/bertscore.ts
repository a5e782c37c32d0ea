import { cosine, embedToken, tokenize } from './embedding';

/**
 * Greedy-matching token similarity F1.
 *
 * Precision is the mean over candidate tokens of the best cosine against any
 * reference token; recall swaps the roles; F1 combines them. This is the
 * bertscore aggregation computed over deterministic local embeddings instead
 * of contextual transformer states, so the service runs with no model
 * downloads. Identical texts score 1.0; soft matching comes from shared
 * character trigrams rather than learned context.
 */
export function bertScore(candidate: string, reference: string): number {
  const cand = tokenize(candidate);
  const ref = tokenize(reference);
  if (cand.length === 0 || ref.length === 0) return 0;

  const candVecs = cand.map(embedToken);
  const refVecs = ref.map(embedToken);

  let precision = 0;
  for (const c of candVecs) {
    let best = -1;
    for (const r of refVecs) best = Math.max(best, cosine(c, r));
    precision += best;
  }
  precision = Math.max(0, precision / candVecs.length);

  let recall = 0;
  for (const r of refVecs) {
    let best = -1;
    for (const c of candVecs) best = Math.max(best, cosine(c, r));
    recall += best;
  }
  recall = Math.max(0, recall / refVecs.length);

  if (precision + recall === 0) return 0;
  const f1 = (2 * precision * recall) / (precision + recall);
  return Math.min(1, Math.max(0, f1));
}

/** Baseline rescaling as commonly applied to bertscore; off by default. */
export function rescale(score: number, baseline: number): number {
  if (baseline >= 1) return score;
  return Math.min(1, Math.max(0, (score - baseline) / (1 - baseline)));
}
