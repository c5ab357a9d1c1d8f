use motion_diffusion_web::{class_prompts, part_blend, skeleton_parents};

#[test]
fn blend_takes_each_half_from_its_class() {
    let parents = skeleton_parents();
    assert_eq!(parents[0], -1);
    assert_eq!(class_prompts().len(), 8);
    let waves_waves = part_blend(0, 0, 7).unwrap();
    let kicks_kicks = part_blend(2, 2, 7).unwrap();
    let mixed = part_blend(0, 2, 7).unwrap();
    let upper = [1usize, 2, 3, 4, 5];
    for j in 0..parents.len() {
        let src = if upper.contains(&j) {
            &waves_waves
        } else {
            &kicks_kicks
        };
        assert_eq!(
            &mixed[3 * j..3 * j + 3],
            &src[3 * j..3 * j + 3],
            "joint {j}"
        );
    }
}
