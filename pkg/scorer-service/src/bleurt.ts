import { cosine, embedText, tokenize } from './embedding';

function unigramF1(cand: string[], ref: string[]): number {
  if (cand.length === 0 || ref.length === 0) return 0;
  const counts = new Map<string, number>();
  for (const t of ref) counts.set(t, (counts.get(t) ?? 0) + 1);
  let overlap = 0;
  for (const t of cand) {
    const left = counts.get(t) ?? 0;
    if (left > 0) {
      overlap++;
      counts.set(t, left - 1);
    }
  }
  if (overlap === 0) return 0;
  const p = overlap / cand.length;
  const r = overlap / ref.length;
  return (2 * p * r) / (p + r);
}

/**
 * Deterministic stand-in for a learned regression quality score, calibrated
 * to [0, 1]. Blends sentence-embedding cosine, multiset unigram F1, and a
 * length ratio with fixed weights; identical texts score 1.0 and unrelated
 * texts drift toward 0. Not a trained model: the fixed weights take the
 * place of learned regression parameters so output stays reproducible
 * without checkpoint downloads.
 */
export function bleurtScore(candidate: string, reference: string): number {
  const cand = tokenize(candidate);
  const ref = tokenize(reference);
  if (cand.length === 0 || ref.length === 0) return 0;

  let sim = cosine(embedText(cand), embedText(ref));
  sim = Math.max(0, sim);
  const f1 = unigramF1(cand, ref);
  const lenRatio =
    Math.min(cand.length, ref.length) / Math.max(cand.length, ref.length);

  const score = 0.55 * sim + 0.35 * f1 + 0.1 * lenRatio;
  return Math.min(1, Math.max(0, score));
}
