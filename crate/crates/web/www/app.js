import init, { quantize, retrieve, timeline } from "./pkg/hybridkv_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(id, result) {
  const el = $(id);
  el.classList.toggle("err", "error" in result);
  return el;
}

function clear(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  return ctx;
}

function runQuantize() {
  const r = JSON.parse(quantize($("q-values").value, num("q-bits"), num("q-group")));
  const out = show("q-out", r);
  const canvas = $("q-canvas");
  const ctx = clear(canvas);
  if (r.error) { out.textContent = r.error; return; }
  const vals = r.groups.flatMap((g) => g.values);
  const lo = Math.min(...vals), hi = Math.max(...vals);
  const pad = (hi - lo) * 0.1 || 1;
  const y = (v) => canvas.height - 10 - ((v - lo + pad) / (hi - lo + 2 * pad)) * (canvas.height - 20);
  const w = canvas.width / vals.length;
  let i = 0;
  for (const g of r.groups) {
    g.values.forEach((v, j) => {
      const x = (i + 0.5) * w;
      const d = g.dequantized[j];
      ctx.fillStyle = "#ccc";
      ctx.fillRect(x - w * 0.3, y(d + g.bound), w * 0.6, y(d - g.bound) - y(d + g.bound));
      ctx.fillStyle = "#36c";
      ctx.beginPath(); ctx.arc(x, y(v), 4, 0, 7); ctx.fill();
      ctx.fillStyle = "#e63";
      ctx.fillRect(x - w * 0.3, y(d) - 1, w * 0.6, 3);
      i++;
    });
    ctx.strokeStyle = "#999";
    ctx.beginPath(); ctx.moveTo(i * w, 0); ctx.lineTo(i * w, canvas.height); ctx.stroke();
  }
  const lines = r.groups.map((g, k) =>
    `group ${k}: zero ${g.zero.toPrecision(5)} scale ${g.scale.toPrecision(5)} codes [${g.codes}] max error ${g.max_error.toPrecision(3)} (bound ${g.bound.toPrecision(3)})`);
  lines.push(`packed: ${r.packed_hex}  ${r.storage_bytes} bytes vs ${r.fp16_bytes} bytes at fp16`);
  out.textContent = lines.join("\n");
}

function runRetrieve() {
  const r = JSON.parse(retrieve(num("r-seed"), num("r-len"), num("r-mass"), num("r-topk"), num("r-local"), num("r-ds")));
  const out = show("r-out", r);
  const canvas = $("r-canvas");
  const ctx = clear(canvas);
  if (r.error) { out.textContent = r.error; return; }
  const sel = new Set(r.selected), exact = new Set(r.exact_topk);
  // square root keeps the long tail visible next to the planted spikes
  const top = Math.sqrt(Math.max(...r.weights));
  const w = canvas.width / r.seq_len;
  r.weights.forEach((p, j) => {
    const h = (Math.sqrt(p) / top) * (canvas.height - 10);
    ctx.fillStyle = sel.has(j) ? "#36c" : exact.has(j) ? "#e63" : "#bbb";
    ctx.fillRect(j * w, canvas.height - h, Math.max(w, 1), h);
  });
  out.textContent = [
    `recall@${num("r-topk")} ${r.recall.toFixed(4)}   selected mass ${r.selected_mass.toFixed(4)}   cosine ${r.cosine.toFixed(6)}`,
    `critical channels [${r.critical_channels}]   fetched ${r.fetch_bytes} bytes`,
  ].join("\n");
}

function runTimeline() {
  const r = JSON.parse(timeline($("t-labels").value, num("t-len"), num("t-link"), num("t-bits")));
  const out = show("t-out", r);
  const canvas = $("t-canvas");
  const ctx = clear(canvas);
  if (r.error) { out.textContent = r.error; return; }
  const total = r.summary.total || 1;
  const x = (t) => (t / total) * (canvas.width - 20) + 10;
  const rows = { Compute: 20, Transfer: 80 };
  ctx.fillStyle = "#222";
  ctx.fillText("compute", 10, 14);
  ctx.fillText("link", 10, 74);
  for (const e of r.events) {
    if (e.duration <= 0) continue;
    ctx.fillStyle = e.kind === "Compute" ? "#36c" : e.label === "fetch_topk" ? "#e63" : "#3a3";
    ctx.fillRect(x(e.start), rows[e.kind], Math.max(x(e.start + e.duration) - x(e.start), 1), 40);
  }
  const s = r.summary;
  const mib = (b) => (b / 2 ** 20).toFixed(1) + " MiB";
  const fp = Object.fromEntries(r.footprint.filter((row) => row.layer === null).map((row) => [row.method, row.bytes]));
  out.textContent = [
    `step ${(s.total * 1e3).toFixed(3)} ms   compute ${(s.compute * 1e3).toFixed(3)} ms   transfer ${(s.transfer * 1e3).toFixed(3)} ms   overlapped ${(s.overlap_fraction * 100).toFixed(1)}%`,
    `device footprint ${mib(fp["hybrid-total"] + fp["local-window-total"])} vs ${mib(fp["original"])} uncompressed`,
  ].join("\n");
}

await init();
$("q-run").onclick = runQuantize;
$("r-run").onclick = runRetrieve;
$("t-run").onclick = runTimeline;
runQuantize();
runRetrieve();
runTimeline();
