/**
 * Exporter command line.
 *
 *   export-reference --out PATH [--samples N] [--n-total N] [--layers a,b]
 *                    [--token-handling per-token|mean] [--include-bias]
 *       run the shipped reference model through the export path
 *   export-demo      same flags, on the two-layer demo network
 *   verify           --bundle PATH: structural checks, non-zero exit on issues
 */

import { parseArgs } from "node:util";

import { defaultSpec, exportStats, TokenHandling } from "./export.js";
import { buildDemoModel, buildReferenceModel, demoLoader, referenceLoader } from "./reference.js";
import { verifyBundleFile } from "./verify.js";

function usage(): never {
  console.error(
    "usage: cli.js <export-reference|export-demo|verify> [--out PATH] [--bundle PATH]\n" +
      "  [--samples N] [--n-total N] [--layers pat1,pat2] " +
      "[--token-handling per-token|mean] [--include-bias]"
  );
  process.exit(64);
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  if (!command) usage();

  const { values } = parseArgs({
    args: rest,
    options: {
      out: { type: "string" },
      bundle: { type: "string" },
      samples: { type: "string", default: "256" },
      "n-total": { type: "string" },
      layers: { type: "string", default: "" },
      "token-handling": { type: "string", default: "per-token" },
      "include-bias": { type: "boolean", default: false },
    },
  });

  if (command === "verify") {
    if (!values.bundle) usage();
    const report = verifyBundleFile(values.bundle);
    for (const line of report.summaryLines) console.log(line);
    if (report.issues.length > 0) {
      for (const issue of report.issues) {
        console.error(`FAIL [${issue.layer}] ${issue.check}: ${issue.detail}`);
      }
      return 1;
    }
    console.log(`ok: ${report.layers.length} layer(s) verified`);
    return 0;
  }

  if (command !== "export-reference" && command !== "export-demo") usage();
  if (!values.out) usage();
  const tokenHandling = values["token-handling"] as TokenHandling;
  if (tokenHandling !== "per-token" && tokenHandling !== "mean") usage();

  const isDemo = command === "export-demo";
  const model = isDemo ? buildDemoModel() : buildReferenceModel();
  const samples = Number(values.samples);
  const loader = isDemo ? demoLoader(samples) : referenceLoader();
  const spec = defaultSpec({
    layerPatterns: values.layers ? values.layers.split(",") : [""],
    sampleCount: samples,
    nTotal: values["n-total"] ? Number(values["n-total"]) : 1000,
    tokenHandling,
    includeBiasCoordinate: values["include-bias"],
    outPath: values.out,
  });
  try {
    const bundle = exportStats(model, loader, spec);
    const count = bundle.meta.get("sample_count");
    console.log(
      `wrote ${spec.outPath}: ${bundle.entries.length} entries, ` +
        `sample_count ${count?.value}, n_total ${spec.nTotal}`
    );
    return 0;
  } catch (err) {
    console.error(`export failed: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url.endsWith(process.argv[1].split("/").pop()!);
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
