import path from 'node:path';

import { createApp } from './app';
import { ModelRegistry } from './models';

const port = Number(process.env.PORT ?? 8300);
const lockPath =
  process.env.MODELS_LOCK ?? path.join(__dirname, '..', 'models.lock.json');
const rescale = process.env.SCORER_RESCALE === '1';

const registry = new ModelRegistry(rescale);
const app = createApp(registry);

// bind first so probes see 503 during load instead of connection refused
const server = app.listen(port, () => {
  console.log(`scorer listening on :${port} (lock ${lockPath})`);
});

registry.load(lockPath).then(
  () => console.log(`models ready: ${JSON.stringify(registry.models)}`),
  (err) => {
    console.error(String(err));
    server.close(() => process.exit(1));
  },
);
