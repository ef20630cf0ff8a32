use srn_core::eval::{
    decomposition_success, export_latents, horizontal_sweep, iou_overall, iou_per_object, responsibility_trace,
    tile_grid, encode_ppm, BBox, DecompositionReport, ImageResult, ResponsibilityTrace, TraceFrame, ACTIVITY_THRESHOLD,
    GRID_GAP, PIXEL_THRESHOLD,
};
use srn_core::model::{ModelConfig, RefineConfig, SetAutoencoder, Variant};
use srn_core::scenes::{render, Circle, CircleScene, Dataset, SceneConfig, DEFAULT_PALETTE};
use srn_core::tensor::Tensor;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        set_size: 3,
        elem_dim: 4,
        embed_dim: 5,
        hidden_dim: 6,
        fspool_pieces: 4,
        encoder_channels: [2, 2, 2, 3],
        decoder_channels: [2, 2, 2],
        batch_norm: true,
    }
}

fn circle(cx: f64, cy: f64, radius: f64, k: usize) -> Circle {
    Circle { cx, cy, radius, color: DEFAULT_PALETTE[k].1 }
}

/// Slots `[n, 3, s, s]` with each circle rendered alone in its own slot.
fn ideal_slots(scene: &CircleScene, n: usize) -> Tensor<f32> {
    let s = scene.image_size;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    for i in 0..n {
        match scene.circles.get(i) {
            Some(c) => data.extend(render(&CircleScene { image_size: s, circles: vec![*c] }).into_data()),
            None => data.extend(std::iter::repeat_n(0.0, 3 * s * s)),
        }
    }
    Tensor::new(vec![n, 3, s, s], data).unwrap()
}

#[test]
fn perfect_slots_score_full_marks() {
    let scene = CircleScene { image_size: 64, circles: vec![circle(20.0, 20.0, 8.0, 0), circle(44.0, 40.0, 10.0, 1)] };
    let slots = ideal_slots(&scene, 16);
    assert!(decomposition_success(&scene, &slots, ACTIVITY_THRESHOLD));
    assert!(iou_per_object(&slots, &scene, ACTIVITY_THRESHOLD, PIXEL_THRESHOLD) >= 0.95);
    let one = CircleScene { image_size: 64, circles: vec![circle(30.0, 33.0, 6.0, 2)] };
    assert!(iou_per_object(&ideal_slots(&one, 16), &one, ACTIVITY_THRESHOLD, PIXEL_THRESHOLD) >= 0.95);
}

#[test]
fn merged_or_missing_slots_fail_decomposition() {
    let scene = CircleScene { image_size: 32, circles: vec![circle(8.0, 8.0, 4.0, 0), circle(22.0, 22.0, 5.0, 1)] };
    let merged = render(&scene);
    let mut data = merged.into_data();
    data.extend(std::iter::repeat_n(0.0, 3 * 3 * 32 * 32));
    let slots = Tensor::new(vec![4, 3, 32, 32], data).unwrap();
    assert!(!decomposition_success(&scene, &slots, ACTIVITY_THRESHOLD));
    let empty = Tensor::<f32>::zeros(&[4, 3, 32, 32]);
    assert_eq!(iou_per_object(&empty, &scene, ACTIVITY_THRESHOLD, PIXEL_THRESHOLD), 0.0);
    assert_eq!(iou_per_object(&empty, &CircleScene::empty(32), ACTIVITY_THRESHOLD, PIXEL_THRESHOLD), 1.0);
}

#[test]
fn overall_iou_identity_and_disjoint() {
    let a = render(&CircleScene { image_size: 32, circles: vec![circle(8.0, 8.0, 4.0, 0)] });
    let b = render(&CircleScene { image_size: 32, circles: vec![circle(24.0, 24.0, 4.0, 0)] });
    assert_eq!(iou_overall(&a, &a, PIXEL_THRESHOLD).unwrap(), 1.0);
    assert_eq!(iou_overall(&a, &b, PIXEL_THRESHOLD).unwrap(), 0.0);
    let z = Tensor::<f32>::zeros(&[3, 32, 32]);
    assert_eq!(iou_overall(&z, &z, PIXEL_THRESHOLD).unwrap(), 1.0);
    assert!(iou_overall(&a, &Tensor::zeros(&[3, 16, 16]), PIXEL_THRESHOLD).is_err());
}

#[test]
fn bbox_iou_matches_hand_computation() {
    let a = BBox { x0: 0.0, y0: 0.0, x1: 4.0, y1: 4.0 };
    let b = BBox { x0: 2.0, y0: 0.0, x1: 6.0, y1: 4.0 };
    // overlap 8, union 24
    assert!((a.iou(&b) - 8.0 / 24.0).abs() < 1e-12);
    assert_eq!(a.iou(&b), b.iou(&a));
    assert_eq!(a.iou(&a), 1.0);
    let clipped = BBox::of_circle(&circle(2.0, 30.0, 4.0, 0), 32);
    assert_eq!((clipped.x0, clipped.y1), (0.0, 32.0));
}

#[test]
fn report_aggregates_and_round_trips() {
    let row = |id, count, success| ImageResult {
        image_id: id,
        circle_count: count,
        nonempty_slot_count: if success { count } else { 0 },
        success,
        mse: 0.01 * id as f64,
        iou_overall: 0.5,
        iou_per_object: 0.25,
    };
    let r = DecompositionReport::from_images(
        vec![row(0, 1, true), row(1, 1, false), row(2, 3, true), row(3, 1, true)],
        Some((2.0, 1.0)),
        ACTIVITY_THRESHOLD,
        PIXEL_THRESHOLD,
    );
    assert!((r.rate_for(1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.rate_for(3), Some(1.0));
    assert_eq!(r.rate_for(2), None);
    assert_eq!(r.success_rate, 0.75);
    let back: DecompositionReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    let text = r.images_csv();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<ImageResult> = rd.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows, r.images);
}

#[test]
fn trace_csv_round_trips_and_rejects_garbage() {
    let t = ResponsibilityTrace {
        frames: vec![
            TraceFrame { t: 0.0, activity: vec![0.5, 0.0], active_slots: 1, success: true },
            TraceFrame { t: 1.0, activity: vec![0.25, 0.75], active_slots: 2, success: false },
        ],
    };
    assert_eq!(ResponsibilityTrace::from_csv(&t.to_csv()).unwrap(), t);
    assert_eq!(t.handoff_frames(), 1);
    assert_eq!(t.single_slot_frames(), 1);
    assert!(ResponsibilityTrace::from_csv("a,b\n1,2\n").is_err());
    assert!(ResponsibilityTrace::from_csv("frame,t,active_slots,success,slot_0\n0,x,1,1,0.5\n").is_err());
}

#[test]
fn untrained_model_trace_covers_every_frame() {
    let model = SetAutoencoder::new(tiny(), Variant::Srn, RefineConfig::default()).unwrap();
    let params = model.init_params::<f32>(3).unwrap();
    let (a, b) = horizontal_sweep(16, 2.0, DEFAULT_PALETTE[0].1);
    assert_eq!(a.circles[0].cx, 2.5);
    assert_eq!(b.circles[0].cx, 13.5);
    let trace = responsibility_trace(&model, &params, &a, &b, 7).unwrap();
    assert_eq!(trace.frames.len(), 7);
    for (k, f) in trace.frames.iter().enumerate() {
        assert_eq!(f.t, k as f64 / 6.0);
        assert_eq!(f.activity.len(), 3);
        assert!(f.activity.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    let ends = responsibility_trace(&model, &params, &a, &b, 2).unwrap();
    assert_eq!(ends.frames.iter().map(|f| f.t).collect::<Vec<_>>(), vec![0.0, 1.0]);
    assert!(responsibility_trace(&model, &params, &a, &b, 0).is_err());
}

#[test]
fn latent_export_has_one_column_per_dimension() {
    let model = SetAutoencoder::new(tiny(), Variant::Srn, RefineConfig::default()).unwrap();
    let params = model.init_params::<f32>(0).unwrap();
    let ds = Dataset::generate(5, 12, &SceneConfig { max_circles: 2, ..SceneConfig::for_size(16) }).unwrap();
    let text = export_latents(&model, &params, &ds, 4).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rd.headers().unwrap().len(), 7 + 4);
    for rec in rd.records() {
        let rec = rec.unwrap();
        let id: usize = rec[0].parse().unwrap();
        assert_eq!(ds.manifest.scenes[id].circles.len(), 1);
        assert!(rec[2].parse::<f32>().unwrap() > ACTIVITY_THRESHOLD);
    }

    let full = ModelConfig { image_size: 32, ..ModelConfig::default() }.with_width_divisor(4);
    let model = SetAutoencoder::new(full, Variant::Srn, RefineConfig::default()).unwrap();
    let params = model.init_params::<f32>(0).unwrap();
    let empty = Dataset::from_scenes(0, 32, vec![CircleScene::empty(32)]);
    let text = export_latents(&model, &params, &empty, 4).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 64 + 7);
}

#[test]
fn grid_layout_and_ppm_encoding() {
    let p = |v: f32| Tensor::full(&[3, 4, 5], v);
    let g = tile_grid(&[p(0.5), p(0.25), p(0.75)], 2).unwrap();
    assert_eq!(g.shape(), &[3, 8 + GRID_GAP, 10 + GRID_GAP]);
    let w = 10 + GRID_GAP;
    let at = |y: usize, x: usize| g.data()[y * w + x];
    assert_eq!(at(0, 0), 0.5);
    assert_eq!(at(0, 5), 1.0);
    assert_eq!(at(0, 5 + GRID_GAP), 0.25);
    assert_eq!(at(4 + GRID_GAP, 0), 0.75);
    assert_eq!(at(4 + GRID_GAP, 5 + GRID_GAP), 0.0);
    assert!(tile_grid(&[], 2).is_err());

    let bytes = encode_ppm(&Tensor::from_fn(&[3, 1, 2], |i| [0.0, 1.0, 2.0, -1.0, 0.5, 0.5][i])).unwrap();
    let header = b"P6\n2 1\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[0, 255, 128, 255, 0, 128]);
}
