import init, { score_ranking, parse_trace, random_baseline } from "./pkg/cdrbench_demo.js";

const $ = (id) => document.getElementById(id);

function metricsTable(m) {
  const rows = [["HIT", "H"], ["MAP", "P"], ["NDCG", "N"]];
  let html = "<table><tr><th></th><th>@1</th><th>@5</th><th>@10</th></tr>";
  for (const [name, p] of rows) {
    html += `<tr><th>${name}</th>`;
    for (const k of [1, 5, 10]) html += `<td>${m[`${p}@${k}`].toFixed(4)}</td>`;
    html += "</tr>";
  }
  return html + "</table>";
}

function escape(s) {
  return s.replace(/[&<>]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;" })[c]);
}

function guard(out, f) {
  try {
    out.innerHTML = f();
  } catch (e) {
    out.innerHTML = `<p class="error">${escape(String(e))}</p>`;
  }
}

function updateScore() {
  guard($("score-out"), () => {
    const m = JSON.parse(score_ranking($("score-ranking").value, $("score-gt").value, Number($("score-m").value)));
    return metricsTable(m);
  });
}

function updateParse() {
  guard($("parse-out"), () => {
    const fuzzy = $("parse-fuzzy").value.trim();
    const v = JSON.parse(
      parse_trace($("parse-completion").value, $("parse-candidates").value, $("parse-gt").value, fuzzy === "" ? -1 : Number(fuzzy)),
    );
    let html = `<p>Status <b>${v.status}</b>: ${v.ranked.length} ranked, ${v.missing.length} missing, ` +
      `${v.n_hallucinated} hallucinated, ${v.n_format_fixes} format fixes.</p>`;
    html += `<pre>${escape(v.trace)}</pre>`;
    if (v.metrics) html += metricsTable(v.metrics);
    return html;
  });
}

function curve(data) {
  const w = 640, h = 260, pad = 36;
  const n = data.k.length;
  const x = (i) => pad + (i / Math.max(1, n - 1)) * (w - 2 * pad);
  const y = (p) => h - pad - p * (h - 2 * pad);
  const path = (ys) => ys.map((p, i) => `${i ? "L" : "M"}${x(i).toFixed(1)},${y(p).toFixed(1)}`).join(" ");
  let svg = `<svg width="${w}" height="${h}" viewBox="0 0 ${w} ${h}">`;
  svg += `<line x1="${pad}" y1="${y(0)}" x2="${w - pad}" y2="${y(0)}" stroke="#999"/>`;
  svg += `<line x1="${pad}" y1="${y(0)}" x2="${pad}" y2="${y(1)}" stroke="#999"/>`;
  for (const t of [0, 0.5, 1]) svg += `<text x="4" y="${y(t) + 4}">${t}</text>`;
  svg += `<text x="${w - pad}" y="${h - 8}" text-anchor="end">k = ${n}</text><text x="${pad}" y="${h - 8}">k = 1</text>`;
  svg += `<path d="${path(data.exact)}" fill="none" stroke="#1f77b4" stroke-width="2"/>`;
  svg += `<path d="${path(data.simulated)}" fill="none" stroke="#d62728" stroke-dasharray="4 3" stroke-width="2"/>`;
  svg += `<text x="${w - pad}" y="${y(0.12)}" text-anchor="end" fill="#1f77b4">exact</text>`;
  svg += `<text x="${w - pad}" y="${y(0.05)}" text-anchor="end" fill="#d62728">simulated</text>`;
  return svg + "</svg>";
}

function updateBaseline() {
  guard($("base-out"), () => {
    const data = JSON.parse(
      random_baseline(Number($("base-m").value), Number($("base-gt").value), Number($("base-trials").value), Number($("base-seed").value)),
    );
    let table = "<table><tr><th>k</th><th>exact</th><th>simulated</th></tr>";
    for (const k of [1, 5, 10]) {
      if (k <= data.k.length) {
        table += `<tr><td>${k}</td><td>${data.exact[k - 1].toFixed(4)}</td><td>${data.simulated[k - 1].toFixed(4)}</td></tr>`;
      }
    }
    return curve(data) + table + "</table>";
  });
}

await init();
for (const [ids, f] of [
  [["score-m", "score-gt", "score-ranking"], updateScore],
  [["parse-candidates", "parse-completion", "parse-gt", "parse-fuzzy"], updateParse],
  [["base-m", "base-gt", "base-trials", "base-seed"], updateBaseline],
]) {
  for (const id of ids) $(id).addEventListener("input", f);
  f();
}
