import init, { SynthPatch, textureMap, segmentBox, weightMap } from "./pkg/mocl_web.js";

const $ = (id) => document.getElementById(id);
const patchCanvas = $("patch");
const viewCanvas = $("view");
let size = 0;
let rgba = null;
let boxes = [];
let mask = null;

function put(canvas, bytes) {
  canvas.width = size;
  canvas.height = size;
  const img = new ImageData(new Uint8ClampedArray(bytes), size, size);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function drawPatch(drag) {
  put(patchCanvas, rgba);
  const ctx = patchCanvas.getContext("2d");
  if (mask) {
    const over = ctx.getImageData(0, 0, size, size);
    for (let i = 0; i < mask.length; i++) {
      if (mask[i]) {
        over.data[4 * i] = (over.data[4 * i] + 255) >> 1;
        over.data[4 * i + 1] >>= 1;
      }
    }
    ctx.putImageData(over, 0, 0);
  }
  ctx.lineWidth = 0.5;
  ctx.strokeStyle = "#0a0";
  for (let i = 0; i < boxes.length; i += 5) {
    ctx.strokeRect(boxes[i + 1], boxes[i + 2], boxes[i + 3] - boxes[i + 1], boxes[i + 4] - boxes[i + 2]);
  }
  if (drag) {
    ctx.strokeStyle = "#fc0";
    ctx.strokeRect(drag.x0, drag.y0, drag.x1 - drag.x0, drag.y1 - drag.y0);
  }
}

function run(f) {
  $("status").textContent = "";
  try {
    f();
  } catch (e) {
    $("status").textContent = e.message ?? String(e);
  }
}

function render() {
  const p = new SynthPatch(Number($("seed").value) >>> 0, Number($("size").value));
  size = p.size();
  rgba = p.rgba();
  boxes = Array.from(p.boxes());
  p.free();
  mask = new Uint8Array(size * size);
  drawPatch();
  put(viewCanvas, new Uint8Array(size * size * 4));
}

function addBox(x0, y0, x1, y1) {
  const m = segmentBox(rgba, size, size, x0, y0, x1, y1);
  for (let i = 0; i < m.length; i++) mask[i] |= m[i];
}

function pixel(ev) {
  const r = patchCanvas.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - r.left) / r.width) * size);
  const y = Math.floor(((ev.clientY - r.top) / r.height) * size);
  return [Math.min(Math.max(x, 0), size), Math.min(Math.max(y, 0), size)];
}

let start = null;
patchCanvas.addEventListener("mousedown", (ev) => { start = pixel(ev); });
patchCanvas.addEventListener("mousemove", (ev) => {
  if (!start) return;
  const [x, y] = pixel(ev);
  drawPatch({ x0: Math.min(start[0], x), y0: Math.min(start[1], y), x1: Math.max(start[0], x), y1: Math.max(start[1], y) });
});
window.addEventListener("mouseup", (ev) => {
  if (!start) return;
  const [x, y] = pixel(ev);
  const [x0, y0, x1, y1] = [Math.min(start[0], x), Math.min(start[1], y), Math.max(start[0], x), Math.max(start[1], y)];
  start = null;
  run(() => { if (x1 > x0 && y1 > y0) addBox(x0, y0, x1, y1); });
  drawPatch();
});

$("render").onclick = () => run(render);
$("all").onclick = () => run(() => {
  for (let i = 0; i < boxes.length; i += 5) addBox(boxes[i + 1], boxes[i + 2], boxes[i + 3], boxes[i + 4]);
  drawPatch();
});
$("texture").onclick = () => run(() => put(viewCanvas, textureMap(rgba, size, size, Number($("sigma").value))));
$("weights").onclick = () => run(() => {
  put(viewCanvas, weightMap(rgba, size, size, mask, Number($("k").value), Number($("eps").value)));
});

await init();
run(render);
