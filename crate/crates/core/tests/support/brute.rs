use histofuse_core::kernels::{
    conv2d_forward, maxpool_forward, ConvGeometry, Padding, PoolGeometry,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop convolution over NHWC input and HWIO kernels.
pub fn conv_reference(
    x: &[f32],
    [n, h, w, c]: [usize; 4],
    k: &[f32],
    [kh, kw, _, co]: [usize; 4],
    bias: &[f32],
    stride: usize,
    same: bool,
) -> (Vec<f32>, [usize; 4]) {
    let (oh, pt) = extent(h, kh, stride, same);
    let (ow, pl) = extent(w, kw, stride, same);
    let mut out = vec![0.0f32; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0f32;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pt as isize;
                            let xx = (ox * stride + kx) as isize - pl as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xi = ((b * h + y as usize) * w + xx as usize) * c + ci;
                                let ki = ((ky * kw + kx) * c + ci) * co + o;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc + bias[o];
                }
            }
        }
    }
    (out, [n, oh, ow, co])
}

fn extent(input: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = input.div_ceil(stride);
        let total = ((out - 1) * stride + k).saturating_sub(input);
        (out, total / 2)
    } else {
        ((input - k) / stride + 1, 0)
    }
}

/// Window maxima with the first maximum's flat index, scanning rows then columns.
pub fn maxpool_reference(
    x: &[f32],
    [n, h, w, c]: [usize; 4],
    (wh, ww): (usize, usize),
    (sh, sw): (usize, usize),
) -> (Vec<f32>, Vec<usize>) {
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;
    let mut vals = Vec::new();
    let mut idxs = Vec::new();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best: Option<(f32, usize)> = None;
                    for dy in 0..wh {
                        for dx in 0..ww {
                            let i = ((b * h + oy * sh + dy) * w + ox * sw + dx) * c + ch;
                            match best {
                                Some((v, _)) if x[i] <= v => {}
                                _ => best = Some((x[i], i)),
                            }
                        }
                    }
                    let (v, i) = best.unwrap();
                    vals.push(v);
                    idxs.push(i);
                }
            }
        }
    }
    (vals, idxs)
}

#[derive(Debug, Default)]
pub struct OracleTally {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

fn values(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    // Coarse grid values make exact ties common, which exercises tie-breaking.
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.3) {
                rng.gen_range(-4..=4) as f32 * 0.25
            } else {
                rng.gen_range(-1.0f32..1.0)
            }
        })
        .collect()
}

pub fn conv_oracle(cases: usize, seed: u64) -> OracleTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = OracleTally::default();
    while tally.cases < cases {
        let n = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=h.min(4));
        let kw = rng.gen_range(1..=w.min(4));
        let co = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=3);
        let same = rng.gen_bool(0.5);
        let x = values(n * h * w * c, &mut rng);
        let k = values(kh * kw * c * co, &mut rng);
        let bias = values(co, &mut rng);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let geom = ConvGeometry::new(&[n, h, w, c], &[kh, kw, c, co], stride, padding)
            .expect("valid geometry");
        let got = conv2d_forward(&x, &k, &bias, &geom);
        let (want, shape) = conv_reference(&x, [n, h, w, c], &k, [kh, kw, c, co], &bias, stride, same);
        tally.cases += 1;
        if geom.output_shape() != shape || got != want {
            tally.mismatches.push(format!(
                "conv n{n} {h}x{w}x{c} k{kh}x{kw}x{co} s{stride} same={same}"
            ));
        }
    }
    tally
}

pub fn maxpool_oracle(cases: usize, seed: u64) -> OracleTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = OracleTally::default();
    while tally.cases < cases {
        let n = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=3);
        let win = (rng.gen_range(1..=h.min(3)), rng.gen_range(1..=w.min(3)));
        let stride = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = values(n * h * w * c, &mut rng);
        let geom = PoolGeometry::new(&[n, h, w, c], win, stride).expect("valid geometry");
        let (vals, idxs) = maxpool_forward(&x, &geom);
        let (want_vals, want_idxs) = maxpool_reference(&x, [n, h, w, c], win, stride);
        tally.cases += 1;
        if vals != want_vals || idxs != want_idxs {
            tally
                .mismatches
                .push(format!("maxpool n{n} {h}x{w}x{c} win{win:?} s{stride:?}"));
        }
    }
    tally
}
