/**
 * Caption tagger/exporter: raw caption text -> tagged-corpus JSON lines.
 *
 * Uses compromise for tokenization and POS tagging, then derives the
 * dependency edges the downstream corpus format needs (amod for
 * adjective->noun modifiers, det/pobj/prep/acl around them) plus
 * maximal PP/VP phrase spans, with rule-based chunking:
 *   NP  = run of det/adj/other words ending in a noun run
 *   PP  = preposition + following NP
 *   VP  = verb run + optional object NP + all immediately following PPs
 * Only maximal phrases are emitted: a PP inside a VP is not repeated.
 */

import * as fs from "fs";
import nlp from "compromise";

export type Coarse = "noun" | "adj" | "verb" | "prep" | "det" | "other";

export interface OutToken {
  text: string;
  pos: Coarse;
  head: number;
  deprel: string;
}

export interface Phrase {
  kind: "pp" | "vp";
  span: [number, number];
}

export interface TaggedLine {
  caption_id: string;
  image_id: string;
  tokens: OutToken[];
  phrases: Phrase[];
}

export interface PosMap {
  /** ordered [compromiseTag, coarsePos]; first match wins */
  tag_order: [string, Coarse][];
  /** words whose compromise tag should be forced (fed as lexicon) */
  lexicon: Record<string, string>;
}

export function loadPosMap(path: string): PosMap {
  const map = JSON.parse(fs.readFileSync(path, "utf-8")) as PosMap;
  if (!Array.isArray(map.tag_order) || !map.lexicon) {
    throw new Error(`pos map ${path}: expected {tag_order, lexicon}`);
  }
  return map;
}

interface Term {
  text: string;
  tags: string[];
}

/** compromise's tokenization of the raw text (words only; punctuation is
 * carried in term pre/post and never becomes a token). */
export function tokenize(text: string, posMap: PosMap): Term[] {
  const doc = nlp(text, posMap.lexicon);
  const sentences = doc.json({ offset: false }) as {
    terms: { text: string; tags: string[] }[];
  }[];
  return sentences.flatMap((s) =>
    s.terms
      .filter((t) => t.text.length > 0)
      .map((t) => ({ text: t.text.toLowerCase(), tags: t.tags }))
  );
}

function coarseOf(tags: string[], posMap: PosMap): Coarse {
  for (const [tag, coarse] of posMap.tag_order) {
    if (tags.includes(tag)) return coarse;
  }
  return "other";
}

/** Map every term to a coarse POS, with one repair pass: an -ing word
 * that compromise called a noun/adjective but follows a noun and opens a
 * preposition or a fresh noun phrase is a participle ("two dogs sitting
 * under ...", "a man riding a bicycle"). */
export function coarseTags(terms: Term[], posMap: PosMap): Coarse[] {
  const coarse = terms.map((t) => coarseOf(t.tags, posMap));
  for (let i = 1; i < terms.length - 1; i++) {
    if (
      terms[i].text.endsWith("ing") &&
      (coarse[i] === "noun" || coarse[i] === "adj" || coarse[i] === "other") &&
      coarse[i - 1] === "noun" &&
      (coarse[i + 1] === "prep" || coarse[i + 1] === "det")
    ) {
      coarse[i] = "verb";
    }
  }
  return coarse;
}

interface Chunk {
  start: number;
  end: number; // exclusive
  head: number; // index of the head noun
}

/** Maximal noun-phrase chunks: runs of det/adj/other ending in >=1 noun;
 * the last noun of the run is the chunk head. */
function nounChunks(coarse: Coarse[]): Chunk[] {
  const chunks: Chunk[] = [];
  let start: number | null = null;
  let lastNoun: number | null = null;
  const flush = () => {
    if (start !== null && lastNoun !== null) {
      chunks.push({ start, end: lastNoun + 1, head: lastNoun });
    }
    start = null;
    lastNoun = null;
  };
  for (let i = 0; i < coarse.length; i++) {
    const c = coarse[i];
    if (c === "noun") {
      if (start === null) start = i;
      lastNoun = i;
    } else if (c === "det" || c === "adj" || c === "other") {
      if (lastNoun !== null) flush(); // post-nominal word starts a new chunk
      if (start === null) start = i;
    } else {
      flush();
    }
  }
  flush();
  return chunks;
}

export class UnparseableCaption extends Error {}

/** Heads, dependency labels, and maximal PP/VP spans for one caption. */
export function structure(
  terms: Term[],
  coarse: Coarse[]
): { tokens: OutToken[]; phrases: Phrase[] } {
  const n = terms.length;
  const chunks = nounChunks(coarse);
  if (chunks.length === 0) {
    throw new UnparseableCaption("no noun phrase found");
  }
  const chunkOf = new Array<Chunk | null>(n).fill(null);
  for (const ch of chunks) {
    for (let i = ch.start; i < ch.end; i++) chunkOf[i] = ch;
  }
  const root = chunks[0].head;

  const head = new Array<number>(n).fill(root);
  const deprel = new Array<string>(n).fill("dep");
  head[root] = root;
  deprel[root] = "root";

  // within-chunk attachments
  for (const ch of chunks) {
    for (let i = ch.start; i < ch.end; i++) {
      if (i === ch.head) continue;
      head[i] = ch.head;
      if (coarse[i] === "det") deprel[i] = "det";
      else if (coarse[i] === "adj") deprel[i] = "amod";
      else if (coarse[i] === "noun") deprel[i] = "compound";
      else deprel[i] = "dep";
    }
  }
  // adverbs modify the next adjective/verb when adjacent
  for (let i = 0; i < n - 1; i++) {
    if (
      coarse[i] === "other" &&
      (coarse[i + 1] === "adj" || coarse[i + 1] === "verb")
    ) {
      head[i] = i + 1;
      deprel[i] = "advmod";
    }
  }
  // prepositions attach to the preceding verb when adjacent, else to the
  // root; their object is the head of the following noun chunk
  for (let i = 0; i < n; i++) {
    if (coarse[i] === "prep") {
      head[i] = i > 0 && coarse[i - 1] === "verb" ? i - 1 : root;
      deprel[i] = "prep";
      const obj = chunks.find((ch) => ch.start > i);
      if (obj) {
        head[obj.head] = i;
        deprel[obj.head] = "pobj";
      }
    } else if (coarse[i] === "verb") {
      head[i] = root;
      deprel[i] = "acl";
    }
  }
  // the root never points away from itself, whatever matched above
  head[root] = root;
  deprel[root] = "root";

  // phrase spans ------------------------------------------------------------
  const phrases: Phrase[] = [];
  const ppEnd = new Array<number>(n).fill(-1); // prep index -> PP end
  for (let i = 0; i < n; i++) {
    if (coarse[i] !== "prep") continue;
    const obj = chunks.find((ch) => ch.start > i);
    ppEnd[i] = obj ? obj.end : i + 1;
  }
  const inVp = new Array<boolean>(n).fill(false);
  for (let i = 0; i < n; i++) {
    if (coarse[i] !== "verb" || inVp[i]) continue;
    let end = i + 1;
    while (end < n && coarse[end] === "verb") end++; // verb run
    let ext = end;
    const obj = chunks.find((ch) => ch.start === ext); // direct object NP
    if (obj) ext = obj.end;
    while (ext < n && coarse[ext] === "prep" && ppEnd[ext] > ext) {
      ext = ppEnd[ext]; // absorb consecutive PPs
    }
    if (ext > end) {
      phrases.push({ kind: "vp", span: [i, ext] });
      for (let j = i; j < ext; j++) inVp[j] = true;
    }
  }
  for (let i = 0; i < n; i++) {
    if (coarse[i] === "prep" && ppEnd[i] > i && !inVp[i]) {
      phrases.push({ kind: "pp", span: [i, ppEnd[i]] });
    }
  }
  phrases.sort((a, b) => a.span[0] - b.span[0]);

  const tokens = terms.map((t, i) => ({
    text: t.text,
    pos: coarse[i],
    head: head[i],
    deprel: deprel[i],
  }));
  return { tokens, phrases };
}

export function exportCaption(
  captionId: string,
  imageId: string,
  text: string,
  posMap: PosMap
): TaggedLine {
  if (!text || !text.trim()) {
    throw new UnparseableCaption("empty caption text");
  }
  const terms = tokenize(text, posMap);
  if (terms.length === 0) {
    throw new UnparseableCaption("no tokens after tokenization");
  }
  const { tokens, phrases } = structure(terms, coarseTags(terms, posMap));
  return { caption_id: captionId, image_id: imageId, tokens, phrases };
}

export interface ExportStats {
  written: number;
  skipped: number;
}

export function exportFile(
  inPath: string,
  outPath: string,
  posMapPath: string,
  warn: (msg: string) => void = (m) => console.warn(m)
): ExportStats {
  const posMap = loadPosMap(posMapPath);
  const lines = fs
    .readFileSync(inPath, "utf-8")
    .split("\n")
    .filter((l) => l.trim().length > 0);
  const out: string[] = [];
  let skipped = 0;
  for (const [lineNo, line] of lines.entries()) {
    let rec: { caption_id?: string; image_id?: string; text?: string };
    try {
      rec = JSON.parse(line);
    } catch (e) {
      warn(`line ${lineNo + 1}: invalid JSON, skipped (${e})`);
      skipped++;
      continue;
    }
    if (!rec.caption_id || !rec.image_id || typeof rec.text !== "string") {
      warn(`line ${lineNo + 1}: missing caption_id/image_id/text, skipped`);
      skipped++;
      continue;
    }
    try {
      out.push(
        JSON.stringify(
          exportCaption(rec.caption_id, rec.image_id, rec.text, posMap)
        )
      );
    } catch (e) {
      if (e instanceof UnparseableCaption) {
        warn(`caption ${rec.caption_id}: ${e.message}, skipped`);
        skipped++;
      } else {
        throw e;
      }
    }
  }
  fs.writeFileSync(outPath, out.length ? out.join("\n") + "\n" : "");
  return { written: out.length, skipped };
}
