use proptest::prelude::*;
use vdrive::scene::{generate_episode, generate_scene, preference_pair, SceneParams};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenes_are_deterministic_and_valid(seed in any::<u64>()) {
        let params = SceneParams::default();
        let a = generate_scene(seed, &params).unwrap();
        let b = generate_scene(seed, &params).unwrap();
        prop_assert_eq!(&a, &b);
        a.validate().unwrap();
    }

    /// Obstacles never cover drivable pixels or ground-truth waypoints, and
    /// the box list rasterizes to exactly the obstacle mask.
    #[test]
    fn obstacles_are_disjoint_from_road_and_path(seed in any::<u64>()) {
        let s = generate_scene(seed, &SceneParams::default()).unwrap();
        for y in 0..s.height() {
            for x in 0..s.width() {
                let centre = [x as f64 + 0.5, y as f64 + 0.5];
                let boxed = s.obstacles.iter().any(|r| r.contains(centre));
                prop_assert_eq!(boxed, s.obstacle_mask.get(y, x));
                prop_assert!(!(boxed && s.drivable.get(y, x)));
            }
        }
        for p in &s.trajectory {
            prop_assert!(!s.obstacles.iter().any(|r| r.contains(*p)), "{:?} inside an obstacle", p);
        }
    }

    #[test]
    fn episode_frames_share_geometry_size_and_horizon(seed in any::<u64>(), frames in 1usize..8) {
        let params = SceneParams::default();
        let ep = generate_episode(seed, &params, frames).unwrap();
        prop_assert_eq!(ep.len(), frames);
        for f in &ep {
            f.validate().unwrap();
            prop_assert_eq!(f.trajectory.len(), params.horizon);
            prop_assert_eq!((f.height(), f.width()), (params.height, params.width));
        }
    }

    #[test]
    fn rejected_keeps_the_chosen_frame(seed in any::<u64>(), index in 0usize..64) {
        let pair = preference_pair(seed, index, &SceneParams::default()).unwrap();
        prop_assert_eq!(&pair.chosen.drivable, &pair.rejected.drivable);
        prop_assert_eq!(&pair.chosen.obstacle_mask, &pair.rejected.obstacle_mask);
        prop_assert_eq!(&pair.chosen.image, &pair.rejected.image);
        prop_assert_ne!(&pair.chosen.trajectory, &pair.rejected.trajectory);
    }
}
