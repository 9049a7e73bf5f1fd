//! Scores predicted action sequences against a reference with the
//! transposition-aware edit distance.

use ical::metrics::{action_edit_distance, damerau_levenshtein, edit_distance_at_z, normalized_edit_distance};
use ical::sim::{expert_actions, generate_noisy_demo, Catalog, NoiseProfile, Split};

fn main() {
    println!("ab -> ba: {}", damerau_levenshtein(b"ab", b"ba"));
    println!("ca -> abc: {}", damerau_levenshtein(b"ca", b"abc"));
    println!("normalized kitten/sitting: {:.3}", normalized_edit_distance(b"kitten", b"sitting"));
    let guesses = [b"sittin".to_vec(), b"mitten".to_vec()];
    println!("best of two guesses: {:.3}", edit_distance_at_z(&guesses, b"sitting"));

    let catalog = Catalog::builtin();
    for task in catalog.interleaved(Split::Seen, 5) {
        let reference = expert_actions(task, 0);
        let noisy = generate_noisy_demo(task, 0, NoiseProfile::typical());
        println!("{:<16} noisy demo vs reference: {:.3}", task.task_id, action_edit_distance(&noisy.actions, &reference));
    }
}
