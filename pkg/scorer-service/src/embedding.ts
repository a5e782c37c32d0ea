import { createHash } from 'node:crypto';

export const EMBED_DIM = 256;

/** Lowercase alphanumeric word tokens. */
export function tokenize(text: string): string[] {
  return text.toLowerCase().match(/[a-z0-9]+/g) ?? [];
}

function charTrigrams(token: string): string[] {
  // pad so single characters still produce a gram and word boundaries count
  const padded = `^${token}$`;
  const grams: string[] = [];
  for (let i = 0; i + 3 <= padded.length; i++) {
    grams.push(padded.slice(i, i + 3));
  }
  return grams;
}

const tokenCache = new Map<string, Float64Array>();

/**
 * Deterministic token embedding: character trigrams hashed into signed
 * buckets, L2-normalized. Identical tokens map to identical vectors; tokens
 * sharing surface form (inflections, close misspellings) land nearby.
 */
export function embedToken(token: string): Float64Array {
  const cached = tokenCache.get(token);
  if (cached) return cached;

  const vec = new Float64Array(EMBED_DIM);
  for (const gram of charTrigrams(token)) {
    const digest = createHash('sha256').update(gram, 'utf8').digest();
    const bucket = digest.readUInt32BE(0) % EMBED_DIM;
    const sign = digest[4] & 1 ? 1 : -1;
    vec[bucket] += sign;
  }
  let norm = 0;
  for (let i = 0; i < EMBED_DIM; i++) norm += vec[i] * vec[i];
  norm = Math.sqrt(norm);
  if (norm > 0) {
    for (let i = 0; i < EMBED_DIM; i++) vec[i] /= norm;
  }
  tokenCache.set(token, vec);
  return vec;
}

/** Dot product; for unit vectors this is the cosine. */
export function cosine(a: Float64Array, b: Float64Array): number {
  let dot = 0;
  for (let i = 0; i < a.length; i++) dot += a[i] * b[i];
  return dot;
}

/** Mean-pooled, renormalized embedding of a token sequence. */
export function embedText(tokens: string[]): Float64Array {
  const vec = new Float64Array(EMBED_DIM);
  for (const token of tokens) {
    const t = embedToken(token);
    for (let i = 0; i < EMBED_DIM; i++) vec[i] += t[i];
  }
  let norm = 0;
  for (let i = 0; i < EMBED_DIM; i++) norm += vec[i] * vec[i];
  norm = Math.sqrt(norm);
  if (norm > 0) {
    for (let i = 0; i < EMBED_DIM; i++) vec[i] /= norm;
  }
  return vec;
}
