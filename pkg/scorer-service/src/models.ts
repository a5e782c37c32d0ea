import { readFile } from 'node:fs/promises';

export interface ModelInfo {
  id: string;
  version: string;
}

// what this build actually computes; the lockfile must agree or we refuse
// to serve, so two deployments can never emit incomparable scores under
// the same provenance strings
export const BUILTIN_MODELS: Record<string, ModelInfo> = {
  bertscore: { id: 'char3gram-greedy-f1', version: '1.0.0' },
  bleurt: { id: 'lexical-blend-regression', version: '1.0.0' },
};

export class LockMismatch extends Error {}

/**
 * Holds model identity and readiness. The HTTP layer serves 503 until
 * load() has verified the lockfile; a mismatch rejects and the process
 * should exit rather than serve unpinned scores.
 */
export class ModelRegistry {
  ready = false;
  rescaleBaseline: boolean;
  baseline = 0;

  constructor(rescaleBaseline = false) {
    this.rescaleBaseline = rescaleBaseline;
  }

  /** Model identifiers as reported by /health, e.g. "char3gram-greedy-f1@1.0.0". */
  get models(): Record<string, string> {
    const out: Record<string, string> = {};
    for (const [name, info] of Object.entries(BUILTIN_MODELS)) {
      out[name] = `${info.id}@${info.version}`;
    }
    return out;
  }

  async load(lockPath: string): Promise<void> {
    let lock: Record<string, { id?: string; version?: string; baseline?: number }>;
    try {
      lock = JSON.parse(await readFile(lockPath, 'utf8'));
    } catch (err) {
      throw new LockMismatch(`cannot read model lock ${lockPath}: ${err}`);
    }
    for (const [name, info] of Object.entries(BUILTIN_MODELS)) {
      const pinned = lock[name];
      if (!pinned || pinned.id !== info.id || pinned.version !== info.version) {
        throw new LockMismatch(
          `model lock mismatch for ${name}: built ${info.id}@${info.version}, ` +
            `lock has ${pinned ? `${pinned.id}@${pinned.version}` : 'nothing'}`,
        );
      }
    }
    this.baseline = lock.bertscore?.baseline ?? 0;
    this.ready = true;
  }
}
