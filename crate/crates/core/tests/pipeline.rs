mod common;

use common::{inputs, mock, small_config};
use setfuse::pipeline::{edit_set, generate_set, Stage};

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let cfg = small_config();
    let inp = inputs(4, 32);
    let a = generate_set(&cfg, &inp, &mock()).unwrap();
    let b = generate_set(&cfg, &inp, &mock()).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(serde_json::to_string(&a.manifest).unwrap(), serde_json::to_string(&b.manifest).unwrap());
}

#[test]
fn stage_order_per_step() {
    let cfg = small_config();
    let out = generate_set(&cfg, &inputs(3, 32), &mock()).unwrap();
    assert_eq!(out.manifest.steps.len(), 25);
    for s in &out.manifest.steps {
        let mut expect = vec![Stage::DenoiseEdges, Stage::Consolidate];
        if s.t > 10 {
            expect.push(Stage::Guidance);
        }
        assert_eq!(s.stages, expect, "t={}", s.t);
        assert_eq!(s.fused_calls > 0, s.t > 3);
    }
}

#[test]
fn edit_with_identical_prompts_reproduces_sources() {
    let mut cfg = small_config();
    cfg.mode = setfuse::pipeline::Mode::Edit;
    cfg.edit.n_min = 0;
    let mut inp = inputs(3, 32);
    inp.prompts.p_source = Some(inp.prompts.p_nonshared.clone());
    let out = edit_set(&cfg, &inp, &mock()).unwrap();
    let backend = mock();
    for (src, img) in inp.images.iter().zip(&out.images) {
        use setfuse::backend::DenoiserBackend;
        let expect = backend.decode(&backend.encode(src).unwrap()).unwrap();
        assert_eq!(&expect, img);
    }
    assert!(out.manifest.steps.iter().all(|s| !s.stages.contains(&Stage::Guidance)));
}

#[test]
fn prepared_maps_are_mutual_and_mirrored_when_subsampled() {
    use setfuse::correspondence::{CorrespondenceMap, PairMaps, PixelMatch};
    use setfuse::geometry::{Coord, Grid};
    use setfuse::pipeline::prepare_maps;
    let g = Grid::new(4, 4);
    let pm = |a: (u32, u32), b: (u32, u32)| PixelMatch { src: Coord::new(a.0, a.1), dst: Coord::new(b.0, b.1), confidence: 0.9 };
    let fwd: Vec<_> = g.iter().map(|c| pm((c.row, c.col), (c.row, 3 - c.col))).collect();
    let mut bwd: Vec<_> = fwd.iter().map(|m| pm((m.dst.row, m.dst.col), (m.src.row, m.src.col))).collect();
    bwd[0] = pm((0, 3), (2, 2));
    let raw: PairMaps = [
        ((0, 1), CorrespondenceMap::from_matches((0, 1), g, fwd).unwrap()),
        ((1, 0), CorrespondenceMap::from_matches((1, 0), g, bwd).unwrap()),
    ]
    .into();

    let sym = prepare_maps(&raw, g, 1.0, 0, true).unwrap();
    assert_eq!(sym[&(0, 1)].len(), 15);
    let half = prepare_maps(&raw, g, 0.5, 0, true).unwrap();
    assert!(half[&(0, 1)].len() < 15);
    for m in half[&(0, 1)].iter() {
        assert_eq!(half[&(1, 0)].get(m.dst), Some(m.src));
    }
    assert_eq!(half[&(0, 1)].len(), half[&(1, 0)].len());

    let asym = prepare_maps(&raw, g, 1.0, 0, false).unwrap();
    assert_eq!(asym[&(0, 1)].len(), 16);
    assert_eq!(asym[&(1, 0)].get(Coord::new(0, 3)), Some(Coord::new(2, 2)));
}
