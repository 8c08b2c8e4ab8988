//! Losses and training procedures: oracle training, library distillation,
//! conditional expert extraction, and the comparison baselines.

mod losses;
mod train;

pub use losses::{
    ckd_term, kd_term, loss_ckd, loss_kd, loss_scale, loss_soft, scale_term, soft_term, sub_logits, CkdTerms,
};
pub use train::{
    distill_library, extract_expert, extract_experts, train_baseline, train_ckd_head, train_classifier, train_kd,
    train_oracle, train_scratch, train_transfer, Baseline, BaselineInputs, BaselineKind, DistillConfig, EpochRecord,
    ExpertRecord, Features, Monitor, Teacher, TrainConfig, TrainLog, INFER_BATCH,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Dataset, SynthConfig};
    use crate::error::PoeError;
    use crate::netzoo::{weights_digest, Accounting, ArchConfig, BlockNet, InputShape, Visit};
    use crate::par::Exec;
    use crate::tensor::Tensor;

    fn separable() -> Dataset {
        let cfg = SynthConfig {
            num_classes: 4,
            classes_per_task: 1,
            train_per_class: 16,
            eval_per_class: 1,
            image_size: 4,
            class_strength: 2.0,
            noise: 0.1,
            max_shift: 0,
            ..Default::default()
        };
        generate(&cfg).unwrap().0
    }

    fn small(classes: usize) -> ArchConfig {
        ArchConfig::new(10, 0.5, 0.25, classes, InputShape::new(3, 4, 4)).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 16, ..Default::default() }
    }

    fn accuracy(net: &BlockNet, data: &Dataset) -> f32 {
        let pred = net.predict(&data.images, 64, Exec::Sequential).unwrap().argmax_rows();
        pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f32 / data.len() as f32
    }

    #[test]
    fn step_schedule_decays_at_half_and_three_quarters() {
        let tc = TrainConfig { epochs: 40, ..Default::default() };
        assert_eq!(tc.lr_at(0), 0.1);
        assert_eq!(tc.lr_at(19), 0.1);
        assert!((tc.lr_at(20) - 0.02).abs() < 1e-8);
        assert!((tc.lr_at(30) - 0.004).abs() < 1e-8);
    }

    #[test]
    fn oracle_fits_a_separable_set_deterministically() {
        let data = separable();
        let tc = quick(20);
        let (a, log) = train_oracle(&small(4), &data, &tc, None).unwrap();
        assert_eq!(log.epochs.len(), 20);
        assert!(accuracy(&a, &data) >= 0.95, "train accuracy {}", accuracy(&a, &data));
        let (b, _) = train_oracle(&small(4), &data, &tc, None).unwrap();
        assert_eq!(weights_digest(&a), weights_digest(&b));
    }

    #[test]
    fn labels_and_class_counts_are_validated() {
        assert!(matches!(
            Dataset::new(Tensor::zeros(&[1, 3, 4, 4]), vec![4], 4),
            Err(PoeError::Dataset(_))
        ));
        assert!(train_oracle(&small(5), &separable(), &quick(1), None).is_err());
    }

    fn pipeline() -> (Dataset, LibrarySplitFixture) {
        let data = separable();
        let (oracle, _) = train_oracle(&small(4), &data, &quick(5), None).unwrap();
        let teacher = Teacher::from_oracle(&oracle, &data.images, Exec::Sequential).unwrap();
        let dc = DistillConfig { train: quick(3), ..Default::default() };
        let (split, _, _) = distill_library(&small(4), &teacher, &data, &dc, None).unwrap();
        let features = Features::compute(&split, &data.images, Exec::Sequential).unwrap();
        (data, LibrarySplitFixture { split, features, teacher, dc })
    }

    struct LibrarySplitFixture {
        split: crate::netzoo::LibrarySplit,
        features: Features,
        teacher: Teacher,
        dc: DistillConfig,
    }

    #[test]
    fn library_holds_conv1_to_conv3_and_bad_temperature_fails() {
        let (data, fx) = pipeline();
        let mut names = Vec::new();
        fx.split.visit("", &mut |n, _| names.push(n.split('.').next().unwrap().to_string()));
        names.dedup();
        assert_eq!(names, ["conv1", "conv2", "conv3"]);
        let bad = DistillConfig { temperature: 0.0, ..fx.dc.clone() };
        assert!(distill_library(&small(4), &fx.teacher, &data, &bad, None).is_err());
    }

    #[test]
    fn extraction_freezes_the_library_and_sizes_the_head() {
        let (_, fx) = pipeline();
        let before = weights_digest(&fx.split);
        let task = crate::task::PrimitiveTask { id: "a".into(), name: "a".into(), class_indices: vec![1, 3] };
        let rec = extract_expert(&fx.split, &fx.features, &fx.teacher, &task, 0.25, &fx.dc).unwrap();
        assert_eq!(weights_digest(&fx.split), before);
        assert_eq!(rec.library_digest, before);
        assert_eq!(rec.head.num_outputs(), 2);
        assert_eq!(rec.config_digest, fx.dc.digest());
        assert!(rec.head.count_params() > 0);
    }

    #[test]
    fn stale_features_are_rejected() {
        let (_, mut fx) = pipeline();
        fx.split.library.stem.weight.value.data_mut()[0] += 1.0;
        let err = train_ckd_head(&fx.split, &fx.features, &fx.teacher, &[0], 0.25, &fx.dc, None).unwrap_err();
        assert!(matches!(err, PoeError::DigestMismatch { .. }));
    }

    #[test]
    fn baselines_validate_inputs_and_flag_degenerate_tasks() {
        let (data, fx) = pipeline();
        let arch = small(4);
        let before = weights_digest(&fx.split);
        let inputs = BaselineInputs { data: &data, arch, split: None, teacher: None };
        assert!(train_baseline(BaselineKind::Transfer, &inputs, &[0, 1], &fx.dc).is_err());
        assert!(train_baseline(BaselineKind::Kd, &inputs, &[0, 1], &fx.dc).is_err());
        let (_, log) = train_baseline(BaselineKind::Scratch, &inputs, &[2], &fx.dc).unwrap();
        assert!(log.degenerate);

        let inputs = BaselineInputs { split: Some((&fx.split, &fx.features)), teacher: Some(&fx.teacher), ..inputs };
        let (model, _) = train_baseline(BaselineKind::Transfer, &inputs, &[0, 1], &fx.dc).unwrap();
        assert!(matches!(model, Baseline::Head(ref h) if h.num_outputs() == 2));
        assert_eq!(weights_digest(&fx.split), before);
        let (model, _) = train_baseline(BaselineKind::Kd, &inputs, &[0, 1], &fx.dc).unwrap();
        assert!(matches!(model, Baseline::Net(ref n) if n.cfg.num_classes == 4));
    }

    #[test]
    fn parallel_extraction_matches_sequential() {
        let (_, fx) = pipeline();
        let tasks = crate::task::TaskUniverse::uniform(4, 2).unwrap().primitives;
        let seq = extract_experts(&fx.split, &fx.features, &fx.teacher, &tasks, 0.25, &fx.dc, Exec::Sequential).unwrap();
        let par = extract_experts(&fx.split, &fx.features, &fx.teacher, &tasks, 0.25, &fx.dc, Exec::Parallel).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(weights_digest(&a.head), weights_digest(&b.head));
        }
    }
}
