//! Label skew of the Dirichlet partition as alpha grows, plus one
//! client-by-class count table.

use pflsim::data::{dirichlet_partition, generate_shapeset, mean_label_count_std, ShapeSetSpec};

fn main() -> pflsim::Result<()> {
    let data = generate_shapeset(&ShapeSetSpec::default(), 1)?;
    let labels = &data.labels;
    println!("alpha   mean per-client label-count std (10 seeds)");
    for alpha in [0.05, 0.1, 0.5, 1.0, 5.0] {
        let mut total = 0.0;
        for seed in 0..10 {
            total += mean_label_count_std(&dirichlet_partition(labels, 20, alpha, seed)?, labels, data.classes);
        }
        println!("{alpha:<7} {:.2}", total / 10.0);
    }

    let plan = dirichlet_partition(labels, 10, 0.5, 0)?;
    println!("\nalpha = 0.5, 10 clients");
    println!("client  {}", (0..data.classes).map(|k| format!("{k:>5}")).collect::<String>());
    for (id, idx) in plan.clients.iter().enumerate() {
        let mut counts = vec![0; data.classes];
        for &i in idx {
            counts[labels[i]] += 1;
        }
        println!("{id:>6}  {}", counts.iter().map(|c| format!("{c:>5}")).collect::<String>());
    }
    Ok(())
}
