import init, { decayCurve, identityMasks, decodeLabels } from "./pkg/emotionic_web.js";

const $ = (id) => document.getElementById(id);
const MAX_GAP = 12;

function showError(target, err) {
  target.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = String(err.message ?? err);
  target.appendChild(p);
}

function drawDecay() {
  const canvas = $("decay");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 10, w - pad - 10, h - pad - 10);
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  ctx.fillText("1", 8, 16);
  ctx.fillText("0", 8, h - pad + 4);
  const x = (g) => pad + ((g - 1) / (MAX_GAP - 1)) * (w - pad - 10);
  const y = (v) => 10 + (1 - v) * (h - pad - 10);
  for (let g = 1; g <= MAX_GAP; g++) ctx.fillText(String(g), x(g) - 3, h - 10);
  const curves = [
    ["#2c7fb8", +$("mu-self").value, +$("gamma-self").value],
    ["#f03b20", +$("mu-other").value, +$("gamma-other").value],
  ];
  for (const [color, mu, gamma] of curves) {
    let values;
    try {
      values = decayCurve(mu, gamma, MAX_GAP);
    } catch (e) {
      ctx.fillStyle = "#b00";
      ctx.fillText(e.message, pad + 10, 30);
      continue;
    }
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    values.forEach((v, i) => (i ? ctx.lineTo(x(i + 1), y(v)) : ctx.moveTo(x(i + 1), y(v))));
    ctx.stroke();
  }
}

function maskTable(speakers, rowsSelf, rowsOther, segStarts) {
  const table = document.createElement("table");
  const head = table.insertRow();
  head.insertCell().textContent = "";
  speakers.forEach((s, j) => {
    const th = document.createElement("th");
    th.textContent = s;
    if (segStarts.has(j)) th.className = "seg";
    head.appendChild(th);
  });
  speakers.forEach((s, t) => {
    const row = table.insertRow();
    const th = document.createElement("th");
    th.textContent = `${t} ${s}`;
    row.appendChild(th);
    speakers.forEach((_, j) => {
      const td = row.insertCell();
      td.className = "cell" + (rowsSelf[t][j] ? " s" : rowsOther[t][j] ? " o" : "") + (segStarts.has(j) ? " seg" : "");
    });
  });
  return table;
}

function drawMasks() {
  const target = $("masks");
  try {
    const m = JSON.parse(identityMasks($("mask-speakers").value));
    const starts = new Set(m.segments.slice(1).map((s) => s[0]));
    target.replaceChildren(maskTable(m.speakers, m.self, m.other, starts));
  } catch (e) {
    showError(target, e);
  }
}

function drawDecode() {
  const target = $("decode");
  try {
    const text = $("dec-speakers").value;
    const r = JSON.parse(
      decodeLabels(text, +$("dec-k").value, BigInt(Math.max(0, +$("dec-seed").value | 0)), +$("dec-inertia").value, +$("dec-contagion").value),
    );
    const speakers = text.split(/[\s,]+/).filter(Boolean);
    const table = document.createElement("table");
    const head = table.insertRow();
    ["t", "speaker", "per utterance", "chain", "skip chain", "skip posterior"].forEach((h) => {
      const th = document.createElement("th");
      th.textContent = h;
      head.appendChild(th);
    });
    speakers.forEach((s, t) => {
      const row = table.insertRow();
      const best = r.skip.labels[t];
      const cells = [t, s, r.independent.labels[t], r.chain.labels[t], best, r.skip.marginals[t][best].toFixed(3)];
      cells.forEach((c) => (row.insertCell().textContent = c));
    });
    const note = document.createElement("p");
    note.textContent = `log Z: chain ${r.chain.log_z.toFixed(4)}, skip chain ${r.skip.log_z.toFixed(4)}; dyadic segments ${JSON.stringify(r.segments)}`;
    target.replaceChildren(table, note);
  } catch (e) {
    showError(target, e);
  }
}

await init();
$("status").textContent = "";
for (const id of ["mu-self", "gamma-self", "mu-other", "gamma-other"]) $(id).addEventListener("input", drawDecay);
$("mask-speakers").addEventListener("input", drawMasks);
for (const id of ["dec-speakers", "dec-k", "dec-seed", "dec-inertia", "dec-contagion"]) $(id).addEventListener("input", drawDecode);
drawDecay();
drawMasks();
drawDecode();
