use camseg_core::palette::{
    colorize, declassify, load_mask, load_palette, save_mask, save_palette, ClassMap, Palette, IGNORE,
};
use camseg_core::seed::rng_from;
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

fn brute_nearest(p: &Palette, rgb: [u8; 3]) -> u8 {
    let d = |c: [u8; 3]| -> i64 { (0..3).map(|i| (c[i] as i64 - rgb[i] as i64).pow(2)).sum() };
    let mut best = 0;
    for k in 1..p.len() {
        if d(p.color(k)) < d(p.color(best)) {
            best = k;
        }
    }
    best as u8
}

#[test]
fn bundled_palettes() {
    let names: Vec<&str> = Palette::bundled_names().collect();
    assert!(names.contains(&"cityscapes19") && names.contains(&"high_contrast19"));
    let city = Palette::bundled("cityscapes19").unwrap();
    assert_eq!(city.len(), 19);
    assert_eq!(city.color(0), [128, 64, 128]);
    assert_eq!(Palette::bundled("high_contrast19").unwrap().len(), 19);
    assert!(Palette::bundled("nope").is_err());
}

#[test]
fn exhaustive_masks_round_trip() {
    for name in Palette::bundled_names() {
        let p = Palette::bundled(name).unwrap();
        let k = p.len();
        // Every ordered pair of labels appears horizontally adjacent.
        let labels: Vec<u8> = (0..k * k).flat_map(|i| [(i / k) as u8, (i % k) as u8]).collect();
        let mask = ClassMap::new(k, 2 * k, labels).unwrap();
        let img = colorize(&mask, &p).unwrap();
        assert_eq!(declassify(&img, &p), mask, "{name}");
        assert_eq!(colorize(&declassify(&img, &p), &p).unwrap(), img);
    }
}

#[test]
fn random_masks_round_trip() {
    let mut rng = rng_from(3);
    for name in Palette::bundled_names() {
        let p = Palette::bundled(name).unwrap();
        for _ in 0..1000 {
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let labels = (0..h * w).map(|_| rng.random_range(0..p.len()) as u8).collect();
            let mask = ClassMap::new(h, w, labels).unwrap();
            assert_eq!(declassify(&colorize(&mask, &p).unwrap(), &p), mask);
        }
    }
}

#[test]
fn declassify_matches_brute_force_scan() {
    let mut rng = rng_from(7);
    for name in Palette::bundled_names() {
        let p = Palette::bundled(name).unwrap();
        let img = RgbImage::from_fn(32, 32, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let mask = declassify(&img, &p);
        for (x, y, px) in img.enumerate_pixels() {
            assert_eq!(mask.get(y as usize, x as usize), brute_nearest(&p, px.0));
        }
    }
}

#[test]
fn colorized_images_use_only_palette_colors() {
    let p = Palette::bundled("cityscapes19").unwrap();
    let mut mask = ClassMap::filled(4, 5, 3);
    mask.set(1, 1, IGNORE);
    mask.set(2, 4, 18);
    let img = colorize(&mask, &p).unwrap();
    for px in img.pixels() {
        assert!(px.0 == [0, 0, 0] || p.colors().contains(&px.0));
    }
    assert_eq!(img.get_pixel(1, 1).0, [0, 0, 0]);
}

#[test]
fn duplicate_colors_are_rejected() {
    let err = Palette::parse("0 a 1 2 3\n1 b 4 5 6\n2 c 1 2 3\n", "dup").unwrap_err();
    assert!(err.to_string().contains("share color"), "{err}");
}

#[test]
fn palette_and_mask_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = Palette::bundled("toyscapes8").unwrap();
    let path = dir.path().join("p.txt");
    save_palette(&p, &path).unwrap();
    assert_eq!(load_palette(&path).unwrap(), p);
    assert_eq!(Palette::resolve(path.to_str().unwrap()).unwrap(), p);

    let mask = ClassMap::new(2, 3, vec![0, 1, 2, 7, IGNORE, 5]).unwrap();
    let mpath = dir.path().join("m.png");
    save_mask(&mask, &mpath).unwrap();
    assert_eq!(load_mask(&mpath).unwrap(), mask);
}

proptest! {
    #[test]
    fn round_trip_for_any_mask(labels in proptest::collection::vec(0u8..19, 1..64), pal in 0usize..2) {
        let name = ["cityscapes19", "high_contrast19"][pal];
        let p = Palette::bundled(name).unwrap();
        let n = labels.len();
        let mask = ClassMap::new(1, n, labels).unwrap();
        prop_assert_eq!(declassify(&colorize(&mask, &p).unwrap(), &p), mask);
    }

    #[test]
    fn nearest_agrees_with_scan(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
        let p = Palette::bundled("cityscapes19").unwrap();
        prop_assert_eq!(p.nearest([r, g, b]), brute_nearest(&p, [r, g, b]));
    }
}
