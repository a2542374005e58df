import init, { classify_answer, render_battery, text_stats, simulate } from "./pkg/lexprobe_wasm.js";

const $ = (id) => document.getElementById(id);

function guard(target, fn) {
  try {
    fn();
  } catch (e) {
    target.innerHTML = "";
    const p = document.createElement("p");
    p.className = "err";
    p.textContent = String(e.message ?? e);
    target.append(p);
  }
}

function table(headers, rows) {
  const t = document.createElement("table");
  const head = t.insertRow();
  for (const h of headers) {
    const th = document.createElement("th");
    th.textContent = h;
    head.append(th);
  }
  for (const row of rows) {
    const tr = t.insertRow();
    for (const cell of row) {
      const td = tr.insertCell();
      if (cell instanceof Node) td.append(cell);
      else td.textContent = cell;
    }
  }
  return t;
}

function onReply() {
  $("reply-class").textContent = classify_answer($("reply").value);
}

function onWord() {
  const list = $("prompts");
  guard(list, () => {
    list.innerHTML = "";
    for (const p of JSON.parse(render_battery($("probe-word").value))) {
      const li = document.createElement("li");
      li.textContent = `${p.id}: ${p.text}`;
      list.append(li);
    }
  });
}

function onText() {
  const out = $("stats");
  guard(out, () => {
    const s = JSON.parse(text_stats($("text").value, 10));
    out.innerHTML = "";
    const p = document.createElement("p");
    p.textContent = `${s.total_tokens} tokens, ${s.unique_words} distinct words`;
    out.append(p, table(["word", "count"], s.top_n_frequencies.map((w) => [w.word, w.count])));
  });
}

function onSimulate() {
  const out = $("sim");
  guard(out, () => {
    const r = JSON.parse(
      simulate(
        $("words").value,
        $("thresholds").value,
        Number($("rate").value),
        BigInt(Math.max(0, Math.floor(Number($("seed").value) || 0))),
        $("per-prompt").checked,
      ),
    );
    out.innerHTML = "";
    const summary = document.createElement("p");
    summary.textContent =
      `${r.words} words, ${r.complete} complete, ${r.excluded} excluded as unparseable. ` +
      `Code digits read P4 P3 P2 P1, so 0001 means YES to P1 only.`;
    const rows = r.bins.map((b) => {
      const bar = document.createElement("span");
      bar.className = "bar";
      bar.style.width = `${b.percent * 2}px`;
      return [b.code, b.count, b.percent.toFixed(1), bar];
    });
    out.append(summary, table(["code", "count", "%", ""], rows));
    if (r.positive_rates) {
      out.append(table(["prompt", "yes %"], r.positive_rates.map((x, i) => [`P${i + 1}`, (x * 100).toFixed(1)])));
    }
    const c = document.createElement("p");
    c.textContent = `Contradictions (P2 vs P3): ${r.contradictions.length ? r.contradictions.join(", ") : "none"}`;
    out.append(c);
  });
}

await init();
$("reply").addEventListener("input", onReply);
$("probe-word").addEventListener("input", onWord);
$("text").addEventListener("input", onText);
for (const id of ["words", "thresholds", "rate", "seed", "per-prompt"]) {
  $(id).addEventListener("input", onSimulate);
}
onReply();
onWord();
onText();
onSimulate();
