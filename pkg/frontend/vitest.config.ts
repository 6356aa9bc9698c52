import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    // e2e spawns a python server; startup dominates.
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
