import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['test/**/*.test.ts'],
    // Training tests run a real SGD loop on the wasm backend; give them room.
    testTimeout: 300_000,
    hookTimeout: 300_000,
    // The wasm backend is a process-wide singleton with mutable model state;
    // serial files keep runs deterministic.
    fileParallelism: false,
    sequence: { concurrent: false },
  },
});
