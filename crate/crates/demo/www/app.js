import init, { Session } from "./pkg/nbv_demo.js";

const SIZE = 48;
const $ = (id) => document.getElementById(id);
let session;

function log(msg) {
  $("log").textContent = msg + "\n" + $("log").textContent;
}

function blit(canvas, bytes, w, h) {
  const img = new ImageData(new Uint8ClampedArray(bytes), w, h);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function angles() {
  return [Number($("az").value), Number($("el").value)];
}

function redraw() {
  const [az, el] = angles();
  $("azv").textContent = az;
  $("elv").textContent = el;
  blit($("oracle"), session.oracle_view(az, el, SIZE), SIZE, SIZE);
  blit($("field"), session.field_view(az, el, SIZE), SIZE, 2 * SIZE);
  $("status").textContent = `${session.captures()} captures`;
}

function reset() {
  session?.free();
  session = new Session($("scene").value, BigInt($("seed").value));
  $("log").textContent = "";
  redraw();
}

function guarded(fn) {
  return () => {
    try {
      fn();
      redraw();
    } catch (e) {
      log("error: " + e.message);
    }
  };
}

await init();
reset();

$("reset").onclick = reset;
$("az").oninput = redraw;
$("el").oninput = redraw;
$("capture").onclick = guarded(() => {
  const [az, el] = angles();
  log("capture " + session.capture(az, el));
});
$("train").onclick = guarded(() => {
  const r = JSON.parse(session.train(Number($("iters").value)));
  log(`iteration ${r.iteration}: L_I ${r.l_i.toFixed(4)}  sigma^2 ${r.sigma_i_sq.toFixed(4)}  psnr ${r.psnr.toFixed(2)}`);
});
$("plan").onclick = guarded(() => {
  const p = JSON.parse(session.plan_step());
  const rows = p.candidates.map((c, i) =>
    `${i === p.chosen ? "*" : " "} ${c.position.map((v) => v.toFixed(2)).join(", ")}  cost ${c.cost?.toFixed(4) ?? "-"}`);
  log(`next best view (${p.nbv.map((v) => v.toFixed(2))}), path ${p.path_length.toFixed(2)} m\n` + rows.join("\n"));
  const [x, y, z] = p.nbv;
  const r = Math.hypot(x, y, z);
  $("az").value = Math.round(((Math.atan2(z, x) * 180) / Math.PI + 360) % 360);
  $("el").value = Math.round((Math.asin(y / r) * 180) / Math.PI);
});
