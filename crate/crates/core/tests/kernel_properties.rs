//! Property tests for the tensor kernels: every kernel is checked against an
//! independent naive implementation on randomized shapes, plus the
//! structural invariants (padding, depthwise isolation, determinism).

use proptest::prelude::*;

use leyolo_core::postprocess::{nms, Detection};
use leyolo_core::tensor::{conv2d, silu, upsample_nearest2x, ConvWeights, ExecContext, Tensor};

/// Independent six-nested-loop direct convolution.
fn conv2d_reference(x: &Tensor, w: &ConvWeights, stride: usize, padding: usize, groups: usize) -> Tensor {
    let k = w.kernel_size;
    let (batch, cin, h, wd) = x.shape();
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (wd + 2 * padding - k) / stride + 1;
    let icg = cin / groups;
    let ocg = w.out_ch / groups;
    let mut out = Tensor::zeros(batch, w.out_ch, h_out, w_out);
    for b in 0..batch {
        for oc in 0..w.out_ch {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0f32;
                    for ic in 0..icg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let cin_idx = (oc / ocg) * icg + ic;
                                let kidx = ((oc * icg + ic) * k + ky) * k + kx;
                                acc += x.at(b, cin_idx, iy as usize, ix as usize) * w.kernel[kidx];
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn close_rel(a: &Tensor, b: &Tensor, rel: f32) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0))
}

#[derive(Debug, Clone)]
struct ConvCase {
    batch: usize,
    cin_per_group: usize,
    ocg: usize,
    groups: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    x: Vec<f32>,
    kernel: Vec<f32>,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (
        1usize..=2,   // batch
        1usize..=4,   // cin per group
        1usize..=4,   // out channels per group
        1usize..=2,   // groups
        prop::sample::select(vec![1usize, 3, 5]),
        1usize..=2,   // stride
        4usize..=16,  // h
        4usize..=16,  // w
        any::<u64>(),
    )
        .prop_map(|(batch, cpg, ocg, groups, k, stride, h, w, seed)| {
            let cin = cpg * groups;
            let out_ch = ocg * groups;
            let mut state = seed | 1;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
            };
            let x = (0..batch * cin * h * w).map(|_| next()).collect();
            let kernel = (0..out_ch * cpg * k * k).map(|_| next()).collect();
            ConvCase { batch, cin_per_group: cpg, ocg, groups, h, w, k, stride, x, kernel }
        })
        .prop_filter("kernel must fit", |c| c.h >= c.k && c.w >= c.k)
}

proptest! {
    #[test]
    fn conv_matches_naive_reference(case in conv_case()) {
        let ctx = ExecContext::default();
        let cin = case.cin_per_group * case.groups;
        let out_ch = case.ocg * case.groups;
        let x = Tensor::new(case.batch, cin, case.h, case.w, case.x.clone()).unwrap();
        let w = ConvWeights::new(out_ch, case.cin_per_group, case.k, case.kernel.clone()).unwrap();
        let pad = case.k / 2;
        let got = conv2d(&ctx, &x, &w, case.stride, pad, case.groups).unwrap();
        let want = conv2d_reference(&x, &w, case.stride, pad, case.groups);
        prop_assert!(close_rel(&got, &want, 1e-5));
    }

    #[test]
    fn stride_one_same_padding_preserves_dims(
        c in 1usize..=6,
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 5usize..=16,
        w in 5usize..=16,
    ) {
        let ctx = ExecContext::default();
        let x = Tensor::full(1, c, h, w, 0.5);
        let wt = ConvWeights::new(c, c, k, vec![0.1; c * c * k * k]).unwrap();
        let y = conv2d(&ctx, &x, &wt, 1, k / 2, 1).unwrap();
        prop_assert_eq!(y.shape(), (1, c, h, w));
    }

    #[test]
    fn depthwise_isolates_channels(
        c in 2usize..=8,
        perturb in 0usize..8,
        seed in any::<u64>(),
    ) {
        let perturb = perturb % c;
        let check = (perturb + 1) % c;
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        };
        let data: Vec<f32> = (0..c * 64).map(|_| next()).collect();
        let x = Tensor::new(1, c, 8, 8, data).unwrap();
        let kernel: Vec<f32> = (0..c * 9).map(|_| next()).collect();
        let w = ConvWeights::new(c, 1, 3, kernel).unwrap();
        let ctx = ExecContext::default();
        let base = conv2d(&ctx, &x, &w, 1, 1, c).unwrap();
        let mut x2 = x.clone();
        for y in 0..8 {
            for xx in 0..8 {
                let v = x2.at(0, perturb, y, xx);
                x2.set(0, perturb, y, xx, v + 1.0);
            }
        }
        let per = conv2d(&ctx, &x2, &w, 1, 1, c).unwrap();
        prop_assert_eq!(base.plane(0, check), per.plane(0, check));
    }

    #[test]
    fn kernels_are_thread_count_invariant(case in conv_case()) {
        let cin = case.cin_per_group * case.groups;
        let out_ch = case.ocg * case.groups;
        let x = Tensor::new(case.batch, cin, case.h, case.w, case.x.clone()).unwrap();
        let w = ConvWeights::new(out_ch, case.cin_per_group, case.k, case.kernel.clone()).unwrap();
        let pad = case.k / 2;
        let a = conv2d(&ExecContext::new(1), &x, &w, case.stride, pad, case.groups).unwrap();
        let b = conv2d(&ExecContext::new(3), &x, &w, case.stride, pad, case.groups).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn silu_and_upsample_are_finite_and_shaped(
        c in 1usize..=4,
        h in 1usize..=8,
        w in 1usize..=8,
        v in -50.0f32..50.0,
    ) {
        let x = Tensor::full(1, c, h, w, v);
        let s = silu(&x);
        prop_assert!(s.is_finite());
        let u = upsample_nearest2x(&x);
        prop_assert_eq!(u.shape(), (1, c, 2 * h, 2 * w));
    }

    #[test]
    fn nms_is_idempotent_and_never_invents_boxes(
        n in 0usize..60,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32
        };
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x1 = (next() * 20.0).round();
                let y1 = (next() * 20.0).round();
                Detection {
                    bbox: [x1, y1, x1 + 1.0 + (next() * 10.0).round(), y1 + 1.0 + (next() * 10.0).round()],
                    score: (next() * 20.0).round() / 20.0,
                    class_id: (next() * 4.0) as usize,
                }
            })
            .collect();
        let once = nms(&dets, 0.5, 300);
        let twice = nms(&once, 0.5, 300);
        prop_assert_eq!(&once, &twice);
        for k in &once {
            prop_assert!(dets.contains(k));
        }
    }
}
