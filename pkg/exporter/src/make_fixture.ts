/**
 * Regenerate the committed fixture bundle: the reference model's statistics
 * over its four fixed samples. The primary toolkit's cross-component test
 * reads this file through its own bundle reader.
 */

import * as path from "node:path";
import * as url from "node:url";

import { defaultSpec, exportStats } from "./export.js";
import { buildReferenceModel, referenceLoader, REFERENCE_SAMPLES } from "./reference.js";

const here = path.dirname(url.fileURLToPath(import.meta.url));
const out = path.resolve(here, "..", "fixtures", "reference_stats.ldb");

exportStats(
  buildReferenceModel(),
  referenceLoader(),
  defaultSpec({
    sampleCount: REFERENCE_SAMPLES.length,
    nTotal: 1000,
    outPath: out,
  })
);
console.log(`wrote ${out}`);
