import express from 'express';
import type { Express, NextFunction, Request, Response } from 'express';
import { z } from 'zod';

import { bertScore, rescale } from './bertscore';
import { bleurtScore } from './bleurt';
import type { ModelRegistry } from './models';

const ScoreRequest = z.object({
  pairs: z
    .array(
      z.object({
        candidate: z.string().min(1),
        reference: z.string().min(1),
      }),
    )
    .min(1),
});

/**
 * Build the HTTP app around a registry. Scoring is synchronous CPU work on
 * the event loop, so concurrent requests are naturally serialized; clients
 * should treat the endpoint as slow and retryable.
 */
export function createApp(registry: ModelRegistry): Express {
  const app = express();
  app.use(express.json({ limit: '10mb' }));

  app.get('/health', (_req: Request, res: Response) => {
    if (!registry.ready) {
      res.status(503).json({ status: 'loading' });
      return;
    }
    res.json({
      status: 'ok',
      models: registry.models,
      rescale_baseline: registry.rescaleBaseline,
    });
  });

  app.post('/score', (req: Request, res: Response) => {
    if (!registry.ready) {
      res.status(503).json({ error: 'models loading' });
      return;
    }
    const parsed = ScoreRequest.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({ error: parsed.error.issues[0]?.message ?? 'bad request' });
      return;
    }
    const scores = parsed.data.pairs.map(({ candidate, reference }) => {
      let bs = bertScore(candidate, reference);
      if (registry.rescaleBaseline) bs = rescale(bs, registry.baseline);
      return { bertscore: bs, bleurt: bleurtScore(candidate, reference) };
    });
    res.json({ scores });
  });

  // body-parser rejections (bad JSON, oversize) land here
  app.use((err: Error, _req: Request, res: Response, _next: NextFunction) => {
    const status = (err as { status?: number }).status ?? 500;
    res.status(status >= 400 && status < 500 ? 400 : 500).json({ error: err.message });
  });

  return app;
}
