/** CLI: export --in raw.jsonl --out corpus.jsonl --pos-map pos_map.json */

import { exportFile } from "./export";

function parseArgs(argv: string[]): Record<string, string> {
  const args: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith("--") || value === undefined) {
      throw new Error(`bad argument pair: ${key} ${value ?? ""}`);
    }
    args[key.slice(2)] = value;
  }
  return args;
}

function main() {
  const [cmd, ...rest] = process.argv.slice(2);
  if (cmd !== "export") {
    console.error(
      "usage: export --in raw.jsonl --out corpus.jsonl --pos-map pos_map.json"
    );
    process.exit(2);
  }
  let args: Record<string, string> = {};
  try {
    args = parseArgs(rest);
  } catch (e) {
    console.error(String(e));
    process.exit(2);
  }
  for (const key of ["in", "out", "pos-map"]) {
    if (!args[key]) {
      console.error(`missing required flag --${key}`);
      process.exit(2);
    }
  }
  const stats = exportFile(args["in"], args["out"], args["pos-map"]);
  console.log(JSON.stringify(stats));
}

main();
